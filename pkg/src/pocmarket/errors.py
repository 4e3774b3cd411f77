"""Exception types shared across the package.

Every error raised on a contract or verification path derives from
PocmarketError so callers can catch one base type. Verification failures
carry the stage that failed; contract errors never mutate state before
raising (validate-then-commit discipline is enforced in ledger.py).
"""


class PocmarketError(Exception):
    """Base class for all package errors."""


# -- fixed point ------------------------------------------------------------

class Overflow(PocmarketError):
    """A raw value or intermediate left the representable range."""


class DomainError(PocmarketError):
    """Argument outside the mathematical domain (negative sqrt, zero divisor)."""


# -- linear algebra ---------------------------------------------------------

class ShapeMismatch(PocmarketError):
    """Operand dimensions do not line up."""


class LayoutMismatch(PocmarketError):
    """Model weight layouts differ (layer names or shapes)."""


class ZeroVector(PocmarketError):
    """Cosine similarity of a zero vector is undefined."""


class EmptyInput(PocmarketError):
    """Operation needs at least one element."""


# -- training ---------------------------------------------------------------

class Divergence(PocmarketError):
    """Training produced non-finite weights."""


class InsufficientData(PocmarketError):
    """Dataset too small for the requested partition or split."""


# -- outlier detection ------------------------------------------------------

class MissingPrevious(PocmarketError):
    """Cross-round check requires submissions from the previous round."""


class TooFew(PocmarketError):
    """Not enough submissions for the requested statistic."""


# -- contribution -----------------------------------------------------------

class EmptyEval(PocmarketError):
    """Evaluation dataset has no samples."""


class TooManyTrainers(PocmarketError):
    """Exact Shapley enumeration is capped to keep runtime bounded."""


# -- verification -----------------------------------------------------------

class VerifyFail(PocmarketError):
    """A transcript failed verification.

    ``stage`` names the first check that failed (e.g. "commitment",
    "range", "projection", "sqrt", "division", "partition", "count",
    "malformed") so tests and logs can distinguish tampering modes.
    """

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        self.detail = detail
        msg = stage if not detail else f"{stage}: {detail}"
        super().__init__(msg)


# -- ledger / contract ------------------------------------------------------

class NotFound(PocmarketError):
    """Content-addressed store has no blob for this cid."""


class InvalidDescriptor(PocmarketError):
    """Task descriptor failed validation at deploy time."""


class InsufficientDeposit(PocmarketError):
    """Escrow deposit cannot cover fees plus reward pool."""


class WrongPhase(PocmarketError):
    """Operation not permitted in the contract's current phase."""


class WrongRound(PocmarketError):
    """Operation addressed to a round other than the active one."""


class UnknownTrainer(PocmarketError):
    """Trainer id not in the registry."""


class DuplicateRegistration(PocmarketError):
    """Trainer id already registered."""


class DuplicateSubmission(PocmarketError):
    """Trainer already submitted for this round."""


class MissingTranscript(PocmarketError):
    """Round record references a transcript cid the store does not hold."""


# -- orchestrator -----------------------------------------------------------

class ConfigError(PocmarketError):
    """Scenario configuration failed validation."""
