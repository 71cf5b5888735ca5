from typing import Optional


class WsdiagError(Exception):
    """Base class for every error raised by the pipeline."""


class ParameterError(WsdiagError, ValueError):
    pass


class CorpusFormatError(WsdiagError, ValueError):
    def __init__(self, line_number: int, detail: str):
        self.line_number = line_number
        self.detail = detail
        super().__init__(f"line {line_number}: {detail}")


class ExternalEmbeddingError(WsdiagError, ValueError):
    pass


class TrainingError(WsdiagError):
    def __init__(self, detail: str, epoch: Optional[int] = None):
        self.epoch = epoch
        super().__init__(detail if epoch is None else f"epoch {epoch}: {detail}")


class MetricError(WsdiagError, ValueError):
    pass


class PipelineError(WsdiagError):
    """Stage-qualified failure, surfaced by the CLI with a nonzero exit code."""

    def __init__(self, stage: str, detail: str):
        self.stage = stage
        self.detail = detail
        super().__init__(f"[{stage}] {detail}")


class MissingArtifactError(PipelineError):
    def __init__(self, stage: str, required_stage: str, artifact: str):
        self.required_stage = required_stage
        super().__init__(
            stage,
            f"missing artifact {artifact}: run stage '{required_stage}' first",
        )


class StaleArtifactError(PipelineError):
    def __init__(self, stage: str, artifact: str):
        super().__init__(
            stage,
            f"stale artifact {artifact}: checksum does not match the manifest, re-run upstream stages",
        )
