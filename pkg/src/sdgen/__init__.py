"""Single-source domain generalization with uncertainty-guided adversarial augmentation."""
from .config import RunConfig, load_config
from .errors import CheckpointError, ConfigError, NumericError, ParseError

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "ConfigError", "NumericError", "ParseError", "CheckpointError",
           "__version__"]
