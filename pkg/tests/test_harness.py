import pytest

from mcpgate.audit import AuditLog, EventKind
from mcpgate.harness import (
    BENIGN_KIND,
    CATEGORIES,
    HarnessRunner,
    Scenario,
    UnknownKind,
    correlate,
    generate,
    reference_environment,
    run_all,
)


class TestGenerate:
    def test_deterministic_byte_identical(self):
        for kind in CATEGORIES:
            a = generate(kind, 7)
            b = generate(kind, 7)
            assert a == b
            assert a.to_yaml() == b.to_yaml()

    def test_different_seeds_differ(self):
        texts = {generate("DataExfiltration", seed).to_yaml() for seed in range(4)}
        assert len(texts) > 1

    def test_unknown_kind(self):
        with pytest.raises(UnknownKind):
            generate("Cryptomancy", 0)

    def test_yaml_round_trip(self):
        scenario = generate("IdentitySubversion", 3)
        again = Scenario.from_yaml(scenario.to_yaml())
        assert again == scenario

    def test_dos_scenario_shape(self):
        scenario = generate("DoS", 11)
        bursts = [s for s in scenario.steps if s.action == "burst"]
        assert bursts and bursts[0].args["count"] == 100
        assert bursts[0].args["count"] * bursts[0].args["spacing"] == pytest.approx(1.0)

    def test_identity_scenario_covers_required_reasons(self):
        scenario = generate("IdentitySubversion", 5)
        reasons = {e.deny_reason for e in scenario.expectations if e.deny_reason}
        assert {"TokenExpired", "AudienceMismatch", "Revoked", "BindingMismatch"} <= reasons


class TestRun:
    @pytest.mark.parametrize("kind", CATEGORIES)
    def test_category_scenarios_pass(self, kind):
        runner = HarnessRunner(reference_environment())
        result = runner.run(generate(kind, 7))
        assert result.expectations_met == result.expectations_total, result.failures

    def test_benign_sweep_zero_findings_zero_denies(self):
        runner = HarnessRunner(reference_environment())
        result = runner.run(generate(BENIGN_KIND, 7))
        assert result.expectations_met == result.expectations_total, result.failures
        log = runner.env.gateway.audit
        assert log.query(kind=EventKind.AUTHZ_DENY) == []
        assert log.query(kind=EventKind.DETECTION_FINDING) == []
        assert log.query(kind=EventKind.ANOMALY_ALERT) == []
        assert log.query(kind=EventKind.RATE_THROTTLED) == []

    def test_replayed_scenario_gives_same_result(self):
        scenario = generate("ToolPoisoning", 21)
        replayed = Scenario.from_yaml(scenario.to_yaml())
        r1 = HarnessRunner(reference_environment()).run(scenario)
        r2 = HarnessRunner(reference_environment()).run(replayed)
        assert (r1.expectations_met, r1.expectations_total) == (
            r2.expectations_met, r2.expectations_total
        )

    def test_run_all_report(self):
        report = run_all(seed=2)
        assert set(report.categories) == set(CATEGORIES)
        assert report.all_met, {k: c.failures for k, c in report.categories.items()}
        assert report.benign_false_positives == 0
        assert report.benign_requests > 0
        assert report.wall_time < 180.0

    def test_report_determinism(self):
        a = run_all(seed=4)
        b = run_all(seed=4)
        assert a.rows() == b.rows()
        assert a.audit_kind_counts == b.audit_kind_counts
        assert a.benign_requests == b.benign_requests
        assert a.benign_false_positives == b.benign_false_positives


class TestCorrelate:
    def _log(self):
        return AuditLog()

    def test_bruteforce_then_success_inside_window(self):
        log = self._log()
        for i in range(3):
            log.append(EventKind.AUTHN_FAILURE, "alice", ts=float(i))
        log.append(EventKind.AUTHN_SUCCESS, "alice", ts=10.0)
        alerts = correlate(log)
        assert [a.rule_id for a in alerts] == ["auth.bruteforce_then_success"]
        assert alerts[0].group == "alice"
        assert len(alerts[0].seqs) == 4

    def test_success_outside_window(self):
        log = self._log()
        for i in range(3):
            log.append(EventKind.AUTHN_FAILURE, "alice", ts=float(i))
        log.append(EventKind.AUTHN_SUCCESS, "alice", ts=100.0)
        assert correlate(log) == []

    def test_empty_log(self):
        assert correlate(self._log()) == []

    def test_deny_burst(self):
        log = self._log()
        for i in range(5):
            log.append(EventKind.AUTHZ_DENY, "alice", {"session_id": "s1"}, ts=float(i))
        alerts = correlate(log)
        assert [a.rule_id for a in alerts] == ["authz.deny_burst"]

    def test_finding_then_invocation_without_quarantine(self):
        log = self._log()
        log.append(EventKind.DETECTION_FINDING, "gw", {"tool": "alpha:t"}, ts=1.0)
        log.append(EventKind.TOOL_INVOKED, "alice", {"tool": "alpha:t"}, ts=2.0)
        alerts = correlate(log)
        assert [a.rule_id for a in alerts] == ["detection.finding_then_invocation"]

    def test_quarantine_suppresses_alert(self):
        log = self._log()
        log.append(EventKind.DETECTION_FINDING, "gw", {"tool": "alpha:t"}, ts=1.0)
        log.append(EventKind.TOOL_QUARANTINED, "gw", {"tool": "alpha:t"}, ts=1.5)
        log.append(EventKind.TOOL_INVOKED, "alice", {"tool": "alpha:t"}, ts=2.0)
        assert correlate(log) == []


class TestReport:
    def test_write_report_files(self, tmp_path):
        from mcpgate.report import write_report

        report = run_all(seed=1)
        paths = write_report(report, tmp_path / "out")
        names = sorted(p.name for p in paths)
        assert names == ["audit_events.png", "detection_rates.png", "report.csv"]
        for path in paths:
            assert path.exists() and path.stat().st_size > 0
        header = (tmp_path / "out" / "report.csv").read_text().splitlines()[0]
        assert header == "category,scenarios,expectations,met,detection_rate"
