"""
Explainable cross-attention between frame-level SSL speech embeddings and
interpretable per-aspect tokens (articulation, glottal, phonation, prosody)
for Parkinson's disease vs. healthy-control classification.

Everything, including the autodiff engine, is implemented on top of numpy.
"""

from .attention import VARIANTS
from .encoder import DEFAULT_ASPECTS, AspectFeatureSet
from .model import LABELS, Model, ModelConfig
from .tensor import Rng, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["VARIANTS", "DEFAULT_ASPECTS", "AspectFeatureSet", "LABELS", "Model", "ModelConfig",
           "Rng", "Tensor", "no_grad", "__version__"]
