"""Cross-modal context distillation at desk scale.

A Q-Former adapter, initialized from a toy ASR decoder, is trained to make a
frozen toy language model respond to audio the way it responds to the text
transcript of that audio.
"""

from .config import RunConfig, load_config
from .errors import CmdistillError

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "CmdistillError", "__version__"]
