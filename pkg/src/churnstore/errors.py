"""Exception hierarchy for the churnstore simulator."""


class ChurnstoreError(Exception):
    """Base class for all churnstore errors."""


class InvalidParams(ChurnstoreError):
    """Parameters violate a structural precondition (e.g. n*d odd, d < 3)."""


class GenerationExhausted(ChurnstoreError):
    """Graph (re)generation failed to meet the spectral bound within budget."""


class NotConverged(ChurnstoreError):
    """Iterative eigenvalue estimation exceeded its iteration budget."""


class RateTooHigh(ChurnstoreError):
    """Per-round churn would remove the entire network."""


class OutOfHorizon(ChurnstoreError):
    """Round index outside a schedule's committed horizon."""


class TooLarge(ChurnstoreError):
    """Instance too large for the dense brute-force oracle."""


class UnknownNode(ChurnstoreError):
    """Node id not present in the referenced snapshot."""


class InsufficientSamples(ChurnstoreError):
    """Fewer distinct fresh sample origins than a committee needs."""


class CommitteeDead(ChurnstoreError):
    """No live committee member remains; the maintained object is lost."""


class DomainError(ChurnstoreError):
    """Tree-depth formula undefined for these parameters (denominator <= 0)."""


class NotEnoughPieces(ChurnstoreError):
    """Fewer than K distinct pieces supplied for reconstruction."""


class HashMismatch(ChurnstoreError):
    """Reconstructed or delivered payload does not hash to its item id."""


class ReconstructionImpossible(ChurnstoreError):
    """Fewer than K live pieces at handover; the item is lost."""


class BudgetExceeded(ChurnstoreError):
    """Per-node per-round message budget cap violated."""


class NotFound(ChurnstoreError):
    """Search committee dissolved without locating the item."""


class RequesterGone(ChurnstoreError):
    """Requester churned out before the result could be delivered."""
