"""Forward-warping novel view synthesis with differentiable point splatting."""

__version__ = "0.1.0"

from . import autodiff, geometry, metrics, protocol, scenes, splat  # noqa: F401
from .autodiff import Tape, Tensor  # noqa: F401
from .checkpoint import (  # noqa: F401
    checkpoint_meta,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (  # noqa: F401
    DomainError,
    EmptyInputError,
    FormatError,
    FwdError,
    IoError,
    MissingDepthError,
    NotFittedError,
    ShapeError,
    TrainingDivergedError,
)
from .estimator import NovelViewSynthesizer  # noqa: F401
from .geometry import Intrinsics, Pose  # noqa: F401
from .metrics import psnr, read_metrics_csv, ssim, write_metrics_csv  # noqa: F401
from .pipeline import (  # noqa: F401
    VARIANTS,
    FwdModel,
    LossConfig,
    ModelConfig,
    TrainState,
    ViewInput,
    compute_loss,
    evaluate,
    init_train_state,
    load_model,
    save_model,
    synthesize,
    train,
)
from .scenes import (  # noqa: F401
    SceneBundle,
    SceneView,
    generate_synthetic,
    load_bundle,
    save_bundle,
)
from .splat import PointCloud, SplatConfig, rasterize, render_cloud_t  # noqa: F401
