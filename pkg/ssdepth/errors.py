from typing import Any, List, Sequence, Tuple


class SsdError(Exception):
    pass


class ShapeError(SsdError, ValueError):
    op: str
    shapes: Tuple[Tuple[int, ...], ...]

    def __init__(self, op: str, shapes: Sequence[Sequence[int]], detail: str = ''):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        rendered = ', '.join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DomainError(SsdError, ValueError):
    op: str

    def __init__(self, op: str, reason: str):
        self.op = op
        super().__init__(f"{op}: {reason}")


class NonFiniteError(SsdError, FloatingPointError):
    location: str

    def __init__(self, location: str, detail: str = ''):
        self.location = location
        message = f"non-finite value at {location}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class GeometryError(SsdError):
    pass


class ConfigError(SsdError, ValueError):
    pass


class CheckpointError(SsdError):
    pass


class DatasetError(SsdError):
    entries: List[str]

    def __init__(self, message: str, entries: Sequence[Any] = ()):
        self.entries = [str(e) for e in entries]
        if self.entries:
            message = f"{message}: {', '.join(self.entries)}"
        super().__init__(message)


class ConditionError(SsdError, ValueError):
    condition: str

    def __init__(self, condition: str, detail: str):
        self.condition = condition
        super().__init__(f"condition '{condition}': {detail}")
