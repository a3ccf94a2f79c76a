import json

from realign_lab.verify import (
    OracleReport,
    run_gradient_oracle,
    run_metric_oracle,
    write_oracle_report,
)


class TestGradientOracle:
    def test_passes_on_clean_gradients(self):
        report = run_gradient_oracle(case_count=12, seed=3)
        assert report.passed
        assert report.max_rel_error < report.tolerance
        assert report.cases == 12

    def test_fault_injection_detected(self):
        report = run_gradient_oracle(case_count=3, seed=3, fault="scale")
        assert not report.passed

    def test_lambda_zero_cases_run(self):
        report = run_gradient_oracle(case_count=3, seed=4, lambdas=(0.0,))
        assert report.passed


class TestMetricOracle:
    def test_passes_on_clean_metrics(self):
        report = run_metric_oracle(case_count=300, seed=1)
        assert report.passed
        assert report.max_rel_error < 1e-9

    def test_fault_injection_detected(self):
        report = run_metric_oracle(case_count=100, seed=1, fault="rank_shift")
        assert not report.passed


def test_report_serialization(tmp_path):
    reports = [
        OracleReport("gradient", 4, 1e-8, 1e-4, True, [3]),
        OracleReport("metric", 100, 0.0, 1e-9, True, [1]),
    ]
    path = tmp_path / "oracle_report.json"
    write_oracle_report(path, reports)
    payload = json.loads(path.read_text())
    assert payload[0]["suite"] == "gradient"
    assert payload[1]["passed"] is True
