"""Context-aware gated cross-modal Mamba for multimodal sentiment regression."""

__version__ = "0.1.0"

from cagmamba.engine import Tensor  # noqa: E402
from cagmamba.model import CagMamba, ModelConfig  # noqa: E402

__all__ = ["CagMamba", "ModelConfig", "Tensor", "__version__"]
