"""Life-pattern driven pseudo-person mobility generation and fidelity evaluation."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    HOME,
    WORK,
    Grid,
    LifePattern,
    RoleSequence,
    Trajectory,
    build_grid,
    devectorize,
    haversine_km,
    vectorize,
)

__all__ = [
    "HOME", "WORK", "Grid", "LifePattern", "RoleSequence", "Trajectory",
    "build_grid", "devectorize", "haversine_km", "vectorize", "__version__",
]
