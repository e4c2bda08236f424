"""UV coordinate maps, dense contact, interaction metrics and latent grasp refinement for hand meshes."""

from importlib.metadata import PackageNotFoundError, version

from .errors import UVGraspError
from .geometry import CameraIntrinsics, Mesh, project, unproject
from .objio import load_obj, save_obj
from .uvmap import UVCoordinateMap, rasterize_coordinate_map, reconstruct_mesh

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree without installation
    __version__ = "0.0.0"

__all__ = [
    "CameraIntrinsics",
    "Mesh",
    "UVCoordinateMap",
    "UVGraspError",
    "__version__",
    "load_obj",
    "project",
    "rasterize_coordinate_map",
    "reconstruct_mesh",
    "save_obj",
    "unproject",
]
