"""Exception taxonomy shared across the package."""


class MssnetError(Exception):
    """Base class for all errors raised by this package."""


class RejectedInputError(MssnetError, ValueError):
    """Input data violates a precondition (non-finite values, bad shapes)."""


class EmptyInputError(MssnetError, ValueError):
    """An operation that requires at least one element received none."""


class ConfigurationError(MssnetError, ValueError):
    """Layer / network / experiment configuration is inconsistent."""


class AlignmentError(MssnetError, ValueError):
    """Two sparse tensors do not live on the same coordinate map."""


class ContractError(MssnetError, ValueError):
    """A caller violated an operation contract (e.g. non-scalar loss)."""


class DegenerateBatchError(MssnetError, ValueError):
    """A batch is too small or entirely ignored for the requested op."""


class PipelineOrderError(MssnetError, RuntimeError):
    """A stage ran before the state it depends on was recorded."""


class InternalConsistencyError(MssnetError, RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""


class OracleInvalidError(MssnetError, RuntimeError):
    """A numerical oracle detected that its own preconditions fail."""


class MalformedFileError(MssnetError, ValueError):
    """A dataset file does not match its documented byte/text layout."""


class PairingError(MssnetError, ValueError):
    """Two files that must describe the same points disagree."""


class CheckpointError(MssnetError, ValueError):
    """A checkpoint file is unreadable or does not match the network."""


class NonFiniteGradientError(MssnetError, RuntimeError):
    """An optimizer step saw a NaN/inf gradient and aborted."""
