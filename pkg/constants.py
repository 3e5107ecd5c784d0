from enum import Enum


class SpatialKind(Enum):
    """
    Spatial interaction operators available inside an S2C block.
    """
    IDENTITY = "identity"
    SEPCONV = "sepconv"
    ATTENTION = "attention"


class FFNKind(Enum):
    """
    Channel aggregation (feed-forward) variants. NONE removes the sub-block.
    """
    VANILLA = "vanilla"
    ADDITIVE = "additive"
    GATED = "gated"
    NONE = "none"


class StageKind(Enum):
    """
    Stage letters used in preset arrangements such as [C, A, A].
    """
    C = "C"
    A = "A"
    I = "I"

    @property
    def spatial_kind(self) -> SpatialKind:
        return {
            StageKind.C: SpatialKind.SEPCONV,
            StageKind.A: SpatialKind.ATTENTION,
            StageKind.I: SpatialKind.IDENTITY,
        }[self]


class ContextMode(Enum):
    """
    Entropy parameter estimation modes.
    """
    HYPERPRIOR_ONLY = "hyperprior_only"
    SCCTX = "scctx"


class QuantMode(Enum):
    """
    Quantizer behaviour: additive noise while training, rounding otherwise.
    """
    TRAIN = "train"
    EVAL = "eval"


class Metric(Enum):
    """
    Distortion metric a model is optimized for.
    """
    MSE = "mse"
    MSSSIM = "msssim"


class ExitCode(Enum):
    """
    Process exit codes for the command-line surface.
    """
    SUCCESS = 0
    TRAINING_HALT = 1
    USAGE = 2
    DATA_ERROR = 3
    INCOMPATIBLE = 4


# Block defaults
DEFAULT_WINDOW_SIZE = 8
DEFAULT_DW_KERNEL = 5
DEFAULT_EXPANSION_RATIO = 4
DEFAULT_HEAD_DIM = 32
LAYER_NORM_EPS = 1e-6

# Transform defaults
DEFAULT_LATENT_CHANNELS = 320
DEFAULT_HYPER_CHANNELS = 192
PAD_MULTIPLE = 64
RESAMPLE_KERNEL = 5

# Entropy model
SIGMA_FLOOR = 1e-6
LIKELIHOOD_FLOOR = 2.0 ** -16
DEFAULT_GROUP_WIDTHS = (16, 16, 32, 64, 192)
FACTORIZED_FILTERS = (3, 3, 3)
FACTORIZED_INIT_SCALE = 10.0

# Codec tables
CDF_PRECISION = 16
SCALES_MIN = 0.11
SCALES_MAX = 256.0
SCALES_LEVELS = 64
TAIL_SIGMAS = 6.0
FACTORIZED_TAIL_MASS = 1e-9
ESCAPE_LITERAL_BITS = 16

# Container format
MAGIC = b"S2C1"
FORMAT_VERSION = 1
FILE_EXTENSION = ".s2c"
UNKNOWN_LAMBDA_INDEX = 255
CUSTOM_VARIANT_ID = 255

VARIANT_IDS = {
    "s2c-identity": 1,
    "s2c-conv": 2,
    "s2c-attention": 3,
    "hybrid-s": 4,
    "hybrid-m": 5,
    "hybrid-l": 6,
    "hybrid-t": 7,
    "arrange-ccc": 8,
    "arrange-aaa": 9,
    "arrange-acc": 10,
    "arrange-cca": 11,
    "arrange-caa": 12,
    "s2c-conv-noca": 13,
    "s2c-attention-noca": 14,
}

# Training protocol
MSE_LAMBDAS = (0.0017, 0.0025, 0.0035, 0.0067, 0.0130, 0.0250, 0.050)
MSSSIM_LAMBDAS = (3, 5, 8, 16, 36, 64)
MSE_DISTORTION_SCALE = 255.0 ** 2
DEFAULT_BATCH_SIZE = 8
DEFAULT_PATCH_SIZE = 256
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_CLIP_NORM = 1.0
CHECKPOINT_FORMAT_VERSION = 1

# Evaluation
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_INFINITY = float("inf")
ERF_DEFAULT_SAMPLES = 8
MIN_PROFILE_REPS = 3


def parse_enum(enum_cls, value):
    """Coerce a string (or member) into enum_cls, raising ConfigurationError otherwise."""
    from errors import ConfigurationError

    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(str(e.value) for e in enum_cls)
        raise ConfigurationError(f"Unknown {enum_cls.__name__} {value!r} (choose from {choices})")
