"""posegraph: bottom-up multi-person pose estimation on a small numpy autodiff engine."""

from .config import RunConfig, load_run_config
from .model import PoseNet, build_model

__all__ = ["PoseNet", "RunConfig", "build_model", "load_run_config"]
__version__ = "0.1.0"
