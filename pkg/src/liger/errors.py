"""Error taxonomy shared across the toolkit. Each class maps to one CLI exit code."""


class LigerError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LigerError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(LigerError):
    """An operation precondition was violated (gate range, rank mismatch, non-scalar loss)."""


class ConfigError(LigerError):
    """Invalid run configuration: schema violation, unknown key, bad enum value."""


class InputError(LigerError):
    """Invalid runtime input: out-of-range token id, empty sequence or split."""


class TrainingError(LigerError):
    """Training aborted: divergence (NaN loss) or no trainable parameters."""


class CheckpointError(LigerError):
    """Base for checkpoint decode failures."""


class TruncatedCheckpointError(CheckpointError):
    """File ended before the declared payload."""


class ChecksumError(CheckpointError):
    """Trailing CRC-32 does not match the file contents."""


class VersionError(CheckpointError):
    """Unknown format version or bad magic; decoding is refused, never best-effort."""
