"""Few-shot image generation by fusing bottleneck features and filling detail with attention."""

__version__ = "0.1.0"

from .config import Config, desk_config, load_config  # noqa: E402,F401
