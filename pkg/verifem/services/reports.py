"""
Report models shared by the estimator services and the exports
"""

from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator


class BoundKind(str, Enum):
    GUARANTEED_UPPER = "guaranteed_upper"
    GUARANTEED_LOWER = "guaranteed_lower"
    INDICATOR = "indicator"


class EstimateReport(BaseModel):
    """Global estimate, optional per-element contributions and provenance"""

    estimator: str
    value: float = Field(ge=0.0)
    bound_kind: BoundKind
    contributions: Optional[List[float]] = None
    reference_error: Optional[float] = None
    effectivity: Optional[float] = None
    backend: Optional[str] = None
    caveats: List[str] = Field(default_factory=list)
    constants: Dict[str, float] = Field(default_factory=dict)
    extras: Dict[str, float] = Field(default_factory=dict)

    @field_validator("contributions")
    @classmethod
    def check_nonnegative(cls, contributions):
        if contributions is not None and min(contributions, default=0.0) < 0.0:
            raise ValueError("element contributions must be nonnegative")
        return contributions

    @model_validator(mode="after")
    def check_contributions_sum(self):
        if self.contributions is not None:
            total = float(np.sum(np.square(self.contributions)))
            if abs(total - self.value ** 2) > 1e-12 * max(total, self.value ** 2, 1e-300):
                raise ValueError(f"sum of squared contributions {total!r} differs from value^2 {self.value ** 2!r}")
        return self

    @property
    def guaranteed(self) -> bool:
        return self.bound_kind != BoundKind.INDICATOR and not self.caveats

    def element_values(self) -> np.ndarray:
        return np.asarray(self.contributions if self.contributions is not None else [], dtype=float)

    def with_reference(self, reference_error: Optional[float]) -> "EstimateReport":
        if reference_error is None:
            return self
        effectivity = self.value / reference_error if reference_error > 0.0 else None
        return self.model_copy(update={"reference_error": reference_error, "effectivity": effectivity})

    @classmethod
    def from_contributions(cls, estimator: str, squared: np.ndarray, bound_kind: BoundKind, **fields) -> "EstimateReport":
        """Build from squared element contributions eta_K^2"""
        squared = np.maximum(np.asarray(squared, dtype=float), 0.0)
        return cls(
            estimator=estimator,
            value=float(np.sqrt(squared.sum())),
            bound_kind=bound_kind,
            contributions=np.sqrt(squared).tolist(),
            **fields,
        )


class GoalBounds(BaseModel):
    """Interval for the quantity of interest Q(u)"""

    method: str
    lower: float
    upper: float
    corrected: float
    correction: float = 0.0
    half_width: float = Field(ge=0.0)
    guaranteed: bool = True
    caveats: List[str] = Field(default_factory=list)
    extras: Dict[str, float] = Field(default_factory=dict)
    element_corrections: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_ordered(self):
        slack = 1e-12 * max(abs(self.lower), abs(self.upper), 1.0)
        if not (self.lower - slack <= self.corrected <= self.upper + slack):
            raise ValueError(f"bounds out of order: {self.lower!r} <= {self.corrected!r} <= {self.upper!r}")
        return self

    def contains(self, value: float, slack: float = 0.0) -> bool:
        return self.lower - slack <= value <= self.upper + slack

    @property
    def width(self) -> float:
        return self.upper - self.lower


class StudyRecord(BaseModel):
    """One row of an adaptive or uniform study"""

    iteration: int
    N: int
    h: float
    eta: float
    ref_error: Optional[float] = None
    i_eff: Optional[float] = None
    seconds: Optional[float] = None
