"""Kronecker-factored approximation of dense and convolutional layers.

Submodules: :mod:`~kronlab.tensor` (array primitives), :mod:`~kronlab.kron`
(Kronecker products and KPSVD), :mod:`~kronlab.layers` (FC, SVD, KFC, conv
and KConv layers), :mod:`~kronlab.cost` (parameter and multiply-add counts),
:mod:`~kronlab.train` (toy training and gradient checks), :mod:`~kronlab.io`
(file formats) and :mod:`~kronlab.cli`.
"""

from . import errors
from .cost import *  # noqa: F401,F403
from .io import *  # noqa: F401,F403
from .kron import *  # noqa: F401,F403
from .layers import *  # noqa: F401,F403
from .tensor import *  # noqa: F401,F403
from .train import *  # noqa: F401,F403
from .cost import __all__ as _cost
from .io import __all__ as _io
from .kron import __all__ as _kron
from .layers import __all__ as _layers
from .tensor import __all__ as _tensor
from .train import __all__ as _train

__version__ = "0.1.0"

__all__ = ["errors"] + _tensor + _kron + _layers + _cost + _train + _io
