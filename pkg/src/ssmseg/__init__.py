"""Statistical shape model segmentation of 3D volumes.

Builds PCA shape spaces from corresponded organ surfaces (coherent point
drift), fits them to voxel-wise probability maps by maximizing captured
probability mass minus a weight penalty (particle swarm search), and scores
masks with regional Jaccard/Dice breakdowns.
"""

__version__ = "0.1.0"

from .cpd import CpdConfig, establish_correspondence, register_nonrigid, register_rigid
from .dataio import (
    FanAcquisition,
    PhantomSpec,
    make_phantom,
    read_cloud,
    read_model,
    read_volume,
    reconstruct_volume,
    resample_contours,
    write_cloud,
    write_model,
    write_volume,
)
from .fitter import FitConfig, FitParams, FitResult, fit, pso_maximize, utility
from .geometry import (
    PointCloud,
    RigidTransform,
    TriMesh,
    Volume3D,
    VolumeKind,
    apply_rigid,
    make_grid,
    triangulate_reference,
    voxelize,
)
from .metrics import RegionalScore, dice, jaccard, regional_jaccard, tabulate
from .ssm import ShapeModel, build_model, project, reconstruct, reconstruction_error
