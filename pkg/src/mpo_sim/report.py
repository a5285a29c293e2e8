from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any


@dataclass
class CheckReport:
    """Outcome of one numerical check; ``location`` is required on failure."""

    name: str
    passed: bool
    margin: float
    tolerance: float
    location: Any = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.passed and self.location is None:
            raise ValueError(f"failed check {self.name!r} must name a worst-case location")

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["status"] = self.status
        return _jsonable(out)

    def line(self) -> str:
        where = "" if self.location is None else f" at {self.location}"
        return f"[{self.status.upper()}] {self.name}: margin={self.margin:.3e} tol={self.tolerance:.1e}{where}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj
