"""
Run configuration - strict INI-style parser and the pydantic models behind it

A run file is a sequence of `key = value` lines. Lines before the first
`[section]` header belong to the top level. `#` and `;` start comment lines.
Every key must be known; values are coerced and validated by pydantic and
errors are reported with the line they come from.

Defaults:
    top level   n=8, estimators=(none), alpha=1.0, patch_enrichment=2,
                fe_enrichment=3, quadrature_degree=10
    [goal]      qoi=subdomain_average, region=0.25,0.5,0.25,0.5,
                direction=1,0, methods=cre,enriched_cre,cs,parallelogram,dwr,
                scaling=(optimal)
    [adapt]     lambda=0.8, epsilon0=1e-3, max_iterations=10,
                estimator=cre_analytic, mode=energy, marking=max, theta=0.5
    [study]     mode=uniform, iterations=4, estimator=cre_analytic
    [output]    directory=$VERIFEM_OUTPUT_DIR or ./output, record_timings=false,
                vtk=true
    [custom]    a11=1, a12=0, a22=1, f=1, g=0, domain=square,
                layout=all_dirichlet
"""

import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from verifem.errors import ConfigError
from verifem.services.estimators import ESTIMATOR_NAMES
from verifem.services.goal import GOAL_METHODS
from verifem.services.problems import PROBLEM_NAMES

logger = logging.getLogger(__name__)

SECTIONS = ("goal", "adapt", "study", "output", "custom")
TOP_LEVEL = ""


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _check_estimator(value: str) -> str:
    if value not in ESTIMATOR_NAMES:
        raise ValueError(f"unknown estimator '{value}', expected one of {', '.join(ESTIMATOR_NAMES)}")
    return value


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class GoalConfig(StrictModel):
    qoi: Literal["subdomain_average", "flux_average"] = "subdomain_average"
    region: Tuple[float, float, float, float] = (0.25, 0.5, 0.25, 0.5)
    direction: Tuple[float, float] = (1.0, 0.0)
    methods: List[str] = Field(default_factory=lambda: list(GOAL_METHODS))
    scaling: Optional[float] = Field(default=None, gt=0.0)

    split_lists = field_validator("region", "direction", "methods", mode="before")(_split_list)

    @field_validator("methods")
    @classmethod
    def check_methods(cls, methods):
        unknown = [m for m in methods if m not in GOAL_METHODS]
        if unknown:
            raise ValueError(f"unknown goal methods {unknown}, expected a subset of {', '.join(GOAL_METHODS)}")
        if not methods:
            raise ValueError("at least one goal method is required")
        return methods


class AdaptConfig(StrictModel):
    """Adaptive loop settings; `lambda` is the max-marking fraction"""

    lambda_: float = Field(default=0.8, alias="lambda")
    epsilon0: float = 1e-3
    max_iterations: int = Field(default=10, ge=1)
    estimator: str = "cre_analytic"
    mode: Literal["energy", "goal"] = "energy"
    marking: Literal["max", "dorfler"] = "max"
    theta: float = 0.5

    @field_validator("lambda_")
    @classmethod
    def check_lambda(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("lambda out of [0,1]")
        return value

    @field_validator("epsilon0")
    @classmethod
    def check_epsilon0(cls, value):
        if value <= 0.0:
            raise ValueError("epsilon0 must be positive")
        return value

    @field_validator("theta")
    @classmethod
    def check_theta(cls, value):
        if not 0.0 < value <= 1.0:
            raise ValueError("theta out of (0,1]")
        return value

    check_estimator = field_validator("estimator")(_check_estimator)


class StudyConfig(StrictModel):
    mode: Literal["uniform", "adaptive"] = "uniform"
    iterations: int = Field(default=4, ge=1)
    estimator: str = "cre_analytic"

    check_estimator = field_validator("estimator")(_check_estimator)


class OutputConfig(StrictModel):
    directory: str = Field(default_factory=lambda: os.getenv("VERIFEM_OUTPUT_DIR", "output"))
    record_timings: bool = False
    vtk: bool = True


class CustomConfig(StrictModel):
    a11: float = 1.0
    a12: float = 0.0
    a22: float = 1.0
    f: float = 1.0
    g: float = 0.0
    domain: Literal["square", "lshape"] = "square"
    layout: Literal["all_dirichlet", "fig1"] = "all_dirichlet"


class RunConfig(StrictModel):
    problem: str
    n: int = Field(default=8, ge=1)
    estimators: List[str] = Field(default_factory=list)
    alpha: float = Field(default=1.0, gt=0.0)
    patch_enrichment: int = Field(default=2, ge=1)
    fe_enrichment: int = Field(default=3, ge=1)
    quadrature_degree: int = Field(default=10, ge=1)
    goal: Optional[GoalConfig] = None
    adapt: Optional[AdaptConfig] = None
    study: Optional[StudyConfig] = None
    output: OutputConfig = Field(default_factory=OutputConfig)
    custom: Optional[CustomConfig] = None

    split_lists = field_validator("estimators", mode="before")(_split_list)

    @field_validator("problem")
    @classmethod
    def check_problem(cls, value):
        if value not in PROBLEM_NAMES:
            raise ValueError(f"unknown problem '{value}', expected one of {', '.join(PROBLEM_NAMES)}")
        return value

    @field_validator("estimators")
    @classmethod
    def check_estimators(cls, names):
        unknown = [name for name in names if name not in ESTIMATOR_NAMES]
        if unknown:
            raise ValueError(f"unknown estimators {unknown}, expected a subset of {', '.join(ESTIMATOR_NAMES)}")
        return names

    def custom_parameters(self) -> Dict[str, object]:
        if self.problem != "custom":
            return {}
        return (self.custom or CustomConfig()).model_dump()


def read_ini(path: Path) -> Tuple[Dict[str, Dict[str, str]], Dict[Tuple[str, str], int]]:
    """Sections of key/value strings and the line number of every key"""
    sections: Dict[str, Dict[str, str]] = {TOP_LEVEL: {}}
    lines: Dict[Tuple[str, str], int] = {}
    section = TOP_LEVEL
    with open(path, "r", encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line[0] in "#;":
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise ConfigError(f"Malformed section header '{line}'", number, str(path))
                section = line[1:-1].strip()
                if section not in SECTIONS:
                    raise ConfigError(f"Unknown section [{section}], expected one of {', '.join(SECTIONS)}",
                                      number, str(path))
                if section in sections:
                    raise ConfigError(f"Duplicate section [{section}]", number, str(path))
                sections[section] = {}
                lines[(section, "")] = number
                continue
            if "=" not in line:
                raise ConfigError(f"Expected 'key = value', got '{line}'", number, str(path))
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError("Missing key before '='", number, str(path))
            if key in sections[section]:
                raise ConfigError(f"Duplicate key '{key}'", number, str(path))
            sections[section][key] = value
            lines[(section, key)] = number
    return sections, lines


def _error_line(location: Tuple, lines: Dict[Tuple[str, str], int]) -> Optional[int]:
    if not location:
        return None
    if location[0] in SECTIONS:
        section = str(location[0])
        key = str(location[1]) if len(location) > 1 else ""
    else:
        section, key = TOP_LEVEL, str(location[0])
    if key == "lambda_":
        key = "lambda"
    return lines.get((section, key), lines.get((section, "")))


def parse_config(path) -> RunConfig:
    """Parse and validate a run file; every failure is a ConfigError with its line"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    sections, lines = read_ini(path)
    data: Dict[str, object] = dict(sections.pop(TOP_LEVEL))
    data.update(sections)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        location = tuple(error["loc"])
        message = str(error["msg"]).removeprefix("Value error, ")
        key = ".".join(str(part) for part in location).replace("lambda_", "lambda")
        if error["type"] == "extra_forbidden":
            message = f"unknown key '{key}'"
        elif error["type"] == "missing":
            message = f"missing required key '{key}'"
        else:
            message = f"{key}: {message}"
        raise ConfigError(message, _error_line(location, lines), str(path)) from exc
    logger.info(f"Loaded config {path}: problem={config.problem} n={config.n} estimators={config.estimators}")
    return config
