"""Chance-constrained electricity market clearing.

Clears DC markets under four balancing-reserve policies (system-wide or
node-to-node, symmetric or asymmetric) plus a security-constrained variant,
derives energy and balancing reserve prices from duals, and verifies the
equilibrium/pricing identities numerically.
"""

__version__ = "0.1.0"

from .clearing import MarketResult, clear_market
from .estimators import MarketClearing, ScopfClearing
from .grid import GridCase, load_case, save_case, scale_res, validate_case
from .policies import Policy
from .uncertainty import UncertaintyModel, assemble, chebyshev_z, split_truncated

__all__ = [
    "MarketResult", "clear_market", "MarketClearing", "ScopfClearing",
    "GridCase", "load_case", "save_case", "scale_res", "validate_case",
    "Policy", "UncertaintyModel", "assemble", "chebyshev_z", "split_truncated",
    "__version__",
]
