"""Inertial Langevin dynamics on compact manifolds, lifted to the orthonormal frame bundle."""
from .geometry import (
    ChartPoint,
    DomainError,
    FrameBundlePoint,
    FrameTangent,
    chart_transition,
    frame_distance,
    geodesic_distance,
    get_manifold,
    horizontal_field,
    orthonormalize,
)
from .fields import ModelSpec, ModelValidationError, make_model, validate_drag_bound
from .linalg import g_kernel, l_matrix, lyapunov_solve, matrix_exp

__version__ = "0.1.0"
