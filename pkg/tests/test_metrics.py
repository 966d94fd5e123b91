"""
Unit tests for the effectivity bookkeeping
"""

import pytest

from evaluation.metrics import EffectivityMetrics
from verifem.services.reports import BoundKind, EstimateReport, StudyRecord


@pytest.fixture
def metrics():
    """Metrics of a study whose error halves with h and quarters with N"""
    metrics = EffectivityMetrics()
    for level in range(4):
        h = 0.5 ** level
        metrics.record_study(StudyRecord(iteration=level, N=4 ** level * 10, h=h, eta=1.2 * h,
                                         ref_error=h, i_eff=1.2))
    return metrics


class TestEffectivityMetrics:
    def test_record_report(self):
        """Test reports are keyed by estimator and backend"""
        metrics = EffectivityMetrics()
        report = EstimateReport(estimator="cre", value=2.0, bound_kind=BoundKind.GUARANTEED_UPPER, backend="fe")
        assert metrics.record_report(report) is None
        assert metrics.record_report(report.with_reference(1.0)) == 2.0
        assert metrics.effectivities == {"cre[fe]": [2.0]}

    def test_rates(self, metrics):
        """Test the fitted rates of an exact power law"""
        assert metrics.fit_rate("h") == pytest.approx(1.0)
        assert metrics.fit_rate("N") == pytest.approx(-0.5)

    def test_constant_effectivity_has_no_drift(self, metrics):
        """Test an h-independent effectivity"""
        assert metrics.effectivity_drift("study") == pytest.approx(0.0, abs=1e-12)
        assert metrics.get_average_metrics() == {"study": pytest.approx(1.2)}

    def test_print_report(self, metrics, capsys):
        """Test the printed summary"""
        metrics.print_report()
        captured = capsys.readouterr().out
        assert "EFFECTIVITY REPORT" in captured
        assert "STUDY: mean i_eff 1.2000" in captured
        assert "RATE vs h: 1.0000" in captured
