"""Real-time EMA processing and articulatory feedback engine."""

from .errors import ArticfeedError
from .geometry import Mesh, RigidTransform, SurfaceHit, rigid_align, bite_plane_frame
from .models import (
    Correspondence,
    MultilinearModel,
    PcaModel,
    generate_synthetic_model,
    generate_synthetic_palate,
    load_model,
    reconstruct_multilinear,
    reconstruct_pca,
    save_model,
)
from .fitting import (
    SolverOptions,
    TrackerConfig,
    TrackerState,
    fit_palate,
    minimize,
    track_frame,
)

__version__ = "0.1.0"

__all__ = [
    "ArticfeedError",
    "Mesh",
    "RigidTransform",
    "SurfaceHit",
    "rigid_align",
    "bite_plane_frame",
    "Correspondence",
    "MultilinearModel",
    "PcaModel",
    "generate_synthetic_model",
    "generate_synthetic_palate",
    "load_model",
    "save_model",
    "reconstruct_multilinear",
    "reconstruct_pca",
    "SolverOptions",
    "TrackerConfig",
    "TrackerState",
    "fit_palate",
    "minimize",
    "track_frame",
]
