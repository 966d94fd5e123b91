"""
Effectivity and convergence-rate bookkeeping for verifem runs
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from verifem.services.adapt import fit_slope
from verifem.services.reports import EstimateReport, StudyRecord


@dataclass
class EffectivityMetrics:
    """Store effectivity indices per estimator and the error history of a study"""

    effectivities: Dict[str, List[float]] = field(default_factory=dict)
    dofs: List[int] = field(default_factory=list)
    sizes: List[float] = field(default_factory=list)
    errors: List[float] = field(default_factory=list)

    def record_report(self, report: EstimateReport) -> Optional[float]:
        """Keep the effectivity of a report; reports without a reference are skipped"""
        if report.effectivity is None:
            return None
        key = report.estimator if report.backend is None else f"{report.estimator}[{report.backend}]"
        self.effectivities.setdefault(key, []).append(report.effectivity)
        return report.effectivity

    def record_study(self, record: StudyRecord):
        self.dofs.append(record.N)
        self.sizes.append(record.h)
        self.errors.append(record.ref_error if record.ref_error is not None else record.eta)
        if record.i_eff is not None:
            self.effectivities.setdefault("study", []).append(record.i_eff)

    def fit_rate(self, against: str = "N", skip: int = 0) -> float:
        """
        Least-squares slope of log(error) against log(N) or log(h)
        """
        x = self.dofs if against == "N" else self.sizes
        return fit_slope(x, self.errors, skip)

    def effectivity_drift(self, name: str) -> float:
        """Slope of i_eff against log(1/h); near zero when the effectivity is h-independent"""
        values = self.effectivities.get(name, [])
        if len(values) != len(self.sizes) or len(values) < 2:
            return 0.0
        slope, _ = np.polyfit(np.log(1.0 / np.asarray(self.sizes)), np.asarray(values), 1)
        return float(slope)

    def get_average_metrics(self) -> Dict[str, float]:
        return {name: float(np.mean(values)) for name, values in self.effectivities.items() if values}

    def print_report(self):
        """Print effectivity and rate summary"""
        averages = self.get_average_metrics()
        print("\n" + "=" * 50)
        print("EFFECTIVITY REPORT")
        print("=" * 50)
        for name, value in averages.items():
            print(f"{name.upper()}: mean i_eff {value:.4f}")
        if len(self.errors) >= 3:
            print(f"RATE vs N: {self.fit_rate('N'):.4f}")
            print(f"RATE vs h: {self.fit_rate('h'):.4f}")
        print("=" * 50 + "\n")
