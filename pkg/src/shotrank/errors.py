"""Exception hierarchy shared across the package."""


class ShotRankError(Exception):
    """Base class for all shotrank errors."""


# --- feature files / datasets ---

class MagicMismatch(ShotRankError):
    """File header is not a valid feature-file header."""


class TruncatedFile(ShotRankError):
    """Payload size disagrees with the header (short read or trailing bytes)."""


class NonFiniteValue(ShotRankError):
    """A NaN or Inf was found where only finite values are allowed."""


class EmptyShot(ShotRankError):
    """A shot received no snippets during aggregation."""


class DegenerateSpec(ShotRankError):
    """Synthetic-data spec would produce zero planted key shots."""


# --- numerics ---

class ShapeMismatch(ShotRankError):
    """Operand shapes are incompatible for the requested operation."""


class LogNonPositive(ShotRankError):
    """log() applied to a value <= 0."""


class NotScalarLoss(ShotRankError):
    """backward() called on a non 1x1 tensor."""


# --- losses / auxiliary sets ---

class EmptyClass(ShotRankError):
    """A ranking loss needs both positives and negatives."""


class TooFewShots(ShotRankError):
    """Pair sampling needs at least two shots."""


class EmptyAuxiliary(ShotRankError):
    """Both sides of an auxiliary set are empty."""


class DegenerateDenominator(ShotRankError):
    """Both weighted sums in a contrastive term underflowed to zero."""


class DegenerateSplit(ShotRankError):
    """Pseudo-label positive and negative sets overlap or are empty."""


class NonFiniteLoss(ShotRankError):
    """Training loss became NaN or Inf."""


# --- evaluation ---

class NoPositives(ShotRankError):
    """Average precision is undefined without at least one positive."""


class NoPositiveWindows(ShotRankError):
    """No window contains a positive label."""


class ListTooShort(ShotRankError):
    """Ranked list is shorter than the requested cutoff."""
