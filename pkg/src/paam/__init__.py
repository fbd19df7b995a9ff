"""Filter pruning with attention-learned importance scores.

A small numpy autodiff engine (:mod:`paam.tensor`, :mod:`paam.ops`) drives a
prunable ResNet-style CNN (:mod:`paam.cnn`). Attention networks
(:mod:`paam.scoring`) map each layer's filters to scores, which are trained
with an L1 penalty, binarized and used to extract a smaller network
(:mod:`paam.pruning`). :mod:`paam.analysis` holds the verification tools.
"""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, no_grad, set_default_dtype, get_default_dtype  # noqa: E402,F401

__all__ = ["Tensor", "ShapeError", "no_grad", "set_default_dtype", "get_default_dtype", "__version__"]
