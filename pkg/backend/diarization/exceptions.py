class DiarizationError(Exception):
    """Base class for every error raised by the diarization package"""


class IntervalError(DiarizationError):
    """An interval with offset <= onset or a negative onset"""


class SegmentationError(DiarizationError):
    pass


class ScaleMismatchError(DiarizationError):
    """Scale layouts that cannot be combined (empty scale, differing K)"""


class ShapeError(DiarizationError):
    """Array shapes that do not fit the kernel or the parameter set"""


class SynthesisError(DiarizationError):
    pass


class CodedError(DiarizationError):
    """Error carrying a stable machine-readable code next to its message"""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class ArchiveError(CodedError):
    pass


class CheckpointError(CodedError):
    pass


class AffinityError(DiarizationError):
    pass


class ClusteringError(DiarizationError):
    pass


class ProfileError(DiarizationError):
    """A speaker without assigned segments or a zero-norm profile vector"""


class TrainingDataError(DiarizationError):
    pass


class RttmParseError(DiarizationError):
    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number
        self.reason = message


class EmptyReferenceError(DiarizationError):
    pass


class ConfigError(DiarizationError):
    pass


class UnmatchedSessionError(DiarizationError):
    """Reference and hypothesis sets that do not cover the same sessions"""

    def __init__(self, missing_hypotheses, missing_references=()):
        self.missing_hypotheses = sorted(missing_hypotheses)
        self.missing_references = sorted(missing_references)
        parts = []
        if self.missing_hypotheses:
            parts.append(f"no hypothesis for: {', '.join(self.missing_hypotheses)}")
        if self.missing_references:
            parts.append(f"no reference for: {', '.join(self.missing_references)}")
        super().__init__('; '.join(parts))
