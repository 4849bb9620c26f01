"""suptlab: subgraph-level universal prompt tuning on frozen GIN backbones.

Plain numpy autodiff with numba kernels for the graph hot loops.  Set
``SUPTLAB_DISABLE_NUMBA=1`` to run the pure-numpy kernels instead.
"""

__version__ = "0.1.0"

from .numerics import ContractError, NumericError, ShapeError  # noqa: E402

__all__ = ["__version__", "ContractError", "NumericError", "ShapeError"]
