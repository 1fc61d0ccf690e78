"""Exception hierarchy shared by all engine modules."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EngineError):
    """Invalid, incomplete, or contradictory configuration."""


# -- corpus / file loading ------------------------------------------------


class CorpusError(EngineError):
    pass


class ParseError(CorpusError):
    """Malformed input record; carries file path and 1-based line number."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" ({loc})"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class DuplicatePage(CorpusError):
    pass


class EmptyCorpus(CorpusError):
    pass


class DuplicateQuestionId(CorpusError):
    pass


class BadOptionLabels(CorpusError):
    pass


# -- backends -------------------------------------------------------------


class BackendFailure(EngineError):
    """Base class for failures talking to an inference backend."""


class TransportError(BackendFailure):
    """Could not complete the request after exhausting retries."""


class TimeoutError(TransportError):  # noqa: A001 - intentional, scoped name
    """Request exceeded its configured timeout."""


class BackendError(BackendFailure):
    """Backend answered, but reported a failure."""


class DimensionMismatch(BackendFailure):
    pass


class LengthMismatch(BackendFailure):
    pass


# -- QA engine ------------------------------------------------------------


class MissingPage(EngineError):
    """Retrieval result references a page absent from the corpus."""


class UnparseableAnswer(EngineError):
    """No parsing rule matched and the similarity fallback is disabled."""


class NoConfidenceSignal(EngineError):
    """Neither option scores nor consistency samples are available."""


# -- scoring --------------------------------------------------------------


class ScoringError(EngineError):
    pass


class MissingPrediction(ScoringError):
    pass


class UnknownQuestionId(ScoringError):
    pass


class MissingGold(ScoringError):
    pass


class DuplicatePrediction(ScoringError):
    pass
