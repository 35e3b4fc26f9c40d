"""Exception hierarchy shared by every stage of the pipeline."""


class KgamlError(Exception):
    """Base class; ``stage`` is filled in by the pipeline when a stage aborts."""

    stage: str | None = None


class MissingColumn(KgamlError):
    def __init__(self, name: str):
        super().__init__(f"missing required column: {name}")
        self.name = name


class ParseError(KgamlError):
    def __init__(self, row: int, field: str, reason: str = ""):
        super().__init__(f"row {row}: bad value for {field}" + (f" ({reason})" if reason else ""))
        self.row = row
        self.field = field
        self.reason = reason


class DuplicateId(KgamlError):
    def __init__(self, id_: str):
        super().__init__(f"duplicate id: {id_}")
        self.id = id_


class EmptyInput(KgamlError):
    pass


class MalformedAnnotation(KgamlError):
    def __init__(self, tx_id: str, reason: str = ""):
        super().__init__(f"malformed annotation for {tx_id}" + (f": {reason}" if reason else ""))
        self.tx_id = tx_id


class LeakageError(KgamlError):
    """Raised when non-train records reach a train-only builder."""


class EmptyGraph(KgamlError):
    pass


class DegenerateCorpus(KgamlError):
    pass


class DimensionMismatch(KgamlError, ValueError):
    pass


DimMismatch = DimensionMismatch


class EmptyIndex(KgamlError):
    pass


class EndpointError(KgamlError):
    def __init__(self, status: int | str, message: str = ""):
        super().__init__(f"endpoint error {status}" + (f": {message}" if message else ""))
        self.status = status


class SchemaError(KgamlError):
    def __init__(self, field: str):
        super().__init__(f"reply schema violation: {field}")
        self.field = field


class EmptyTrain(KgamlError):
    pass


class SingleClassInput(KgamlError):
    pass


class NoLabeledNodes(KgamlError):
    pass


class SingleComponent(KgamlError):
    pass


class RateTooSmall(KgamlError):
    pass


class SingleClassLabels(KgamlError):
    pass


class InvalidSpec(KgamlError):
    pass


class ConfigError(KgamlError):
    pass
