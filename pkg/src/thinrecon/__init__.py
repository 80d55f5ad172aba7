"""thinrecon: hole-free meshes of thin objects from multi-view silhouettes.

The pipeline: COLMAP poses -> normalized scene -> signed field on a
tetrahedral grid, optimized so the marching-tetrahedra surface's soft
silhouettes match the input masks.
"""

__version__ = "0.1.0"

from .colmap import (CameraIntrinsics, ImageRecord, Pose, SceneModel,
                     SimTransform, load_scene, normalize_scene, parse_model,
                     quat_to_rotmat, rotmat_to_quat, save_scene)
from .dataprep import (View, binarize_mask, downscale, load_views,
                       make_mask_threshold, sample_indices)
from .errors import (ModelParseError, NumericalError, PairBudgetError,
                     SceneGeometryError, ViewDataError)
from .meshkit import (MeshQualityReport, boundary_loops, chamfer_distance,
                      connected_components, export_obj, hard_coverage, iou,
                      is_watertight, parse_obj, quality_report, roughness)
from .optimize import (AdamState, TrainConfig, TrainReport, adam_step,
                       init_sdf, train)
from .reconstructor import SilhouetteMeshReconstructor
from .regularize import laplacian_loss, sdf_sign_loss
from .softsil import (RasterSettings, accumulate_sdf_grads,
                      backward_silhouette, project, silhouette_loss,
                      soft_coverage)
from .tetgrid import (SdfField, TetGrid, TriMesh, VertexProvenance,
                      edge_vertex, make_tet_grid, marching_tets)

__all__ = [
    "AdamState", "CameraIntrinsics", "ImageRecord", "MeshQualityReport",
    "ModelParseError", "NumericalError", "PairBudgetError", "Pose",
    "RasterSettings", "SceneGeometryError", "SceneModel", "SdfField",
    "SilhouetteMeshReconstructor", "SimTransform", "TetGrid", "TrainConfig",
    "TrainReport", "TriMesh", "VertexProvenance", "View", "ViewDataError",
    "accumulate_sdf_grads", "adam_step", "backward_silhouette",
    "binarize_mask", "boundary_loops", "chamfer_distance",
    "connected_components", "downscale", "edge_vertex", "export_obj",
    "hard_coverage", "init_sdf", "iou", "is_watertight", "laplacian_loss",
    "load_scene", "load_views", "make_mask_threshold", "make_tet_grid",
    "marching_tets", "normalize_scene", "parse_model", "parse_obj",
    "project", "quality_report", "quat_to_rotmat", "roughness",
    "rotmat_to_quat", "sample_indices", "save_scene", "sdf_sign_loss",
    "silhouette_loss", "soft_coverage", "train",
]
