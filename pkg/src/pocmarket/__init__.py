"""Data marketplace for federated training with verifiable aggregation,
outlier screening, and leave-one-out contribution pricing.

Everything money- or verdict-relevant runs on exact integer arithmetic
(16-bit fixed point, witnessed floor divisions, hash-derived Freivalds
checks), so simulator and verifier can never drift apart. See the
subpackages: fxp, linalg, mlcore, outlier, contribution, verify,
ledger, orchestrator.
"""

from pocmarket._kernels import BACKEND as kernel_backend
from pocmarket.errors import PocmarketError, VerifyFail

__version__ = "0.1.0"

__all__ = ["PocmarketError", "VerifyFail", "kernel_backend", "__version__"]
