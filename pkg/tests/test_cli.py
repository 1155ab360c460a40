"""Tests for the command-line entry point."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from mas_faultlab.annotator import (
    AnnotationRecord,
    BehaviorTag,
    TierOutcome,
    write_annotations,
)
from mas_faultlab.cli import (
    EXIT_ANALYSIS,
    EXIT_CONFIGURATION,
    EXIT_EXECUTION,
    EXIT_OK,
    exit_code,
    main,
)
from mas_faultlab.errors import AnalysisError, ConfigurationError, ExecutionError
from mas_faultlab.taxonomy import FtTier
from mas_faultlab.tracelog import read_manifest

from .common import campaign_document


@pytest.fixture
def campaign_out(tmp_path: Path, write_campaign) -> Path:
    """Output directory of a finished simulated campaign."""
    config = write_campaign(campaign_document())
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(config), "--out", str(out)]) == EXIT_OK
    return out


class TestExitCodes:
    """Tests for exit codes and usage errors."""

    @pytest.mark.parametrize(
        ("err", "code"),
        [
            (ConfigurationError("x"), EXIT_CONFIGURATION),
            (ExecutionError("x"), EXIT_EXECUTION),
            (AnalysisError("x"), EXIT_ANALYSIS),
        ],
    )
    def test_exit_code(self, err: Exception, code: int) -> None:
        """Each error family has its own code."""
        assert exit_code(err) == code

    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["simulate"],
            ["explode"],
            ["annotate"],
            ["annotate", "--traces", ".", "--mode", "judge"],
        ],
    )
    def test_usage_errors(self, argv: list[str]) -> None:
        """Malformed command lines are configuration errors."""
        assert main(argv) == EXIT_CONFIGURATION

    def test_missing_config(self, tmp_path: Path) -> None:
        """An unreadable campaign file is a configuration error."""
        missing = str(tmp_path / "nope.json")
        assert main(["simulate", "--config", missing]) == EXIT_CONFIGURATION

    def test_bad_parallel(self, write_campaign) -> None:
        """--parallel must be positive."""
        config = str(write_campaign(campaign_document()))
        argv = ["simulate", "--config", config, "--parallel", "0"]
        assert main(argv) == EXIT_CONFIGURATION

    def test_missing_traces(self, tmp_path: Path) -> None:
        """Reports need an existing traces directory."""
        assert main(["report", "--traces", str(tmp_path / "nope")]) == 1

    def test_corrupt_trace(self, campaign_out: Path) -> None:
        """A damaged trace file fails the report as an execution error."""
        trace = campaign_out / "traces" / "hallucinate" / "t1.jsonl"
        trace.write_text(trace.read_text()[:-3])
        assert main(["report", "--traces", str(campaign_out)]) == EXIT_EXECUTION


class TestWorkflow:
    """simulate, report and annotate end to end."""

    def test_simulate_refuses_overwrite(
        self, campaign_out: Path, write_campaign
    ) -> None:
        """A second simulate into the same directory needs --force."""
        config = str(write_campaign(campaign_document()))
        argv = ["simulate", "--config", config, "--out", str(campaign_out)]
        assert main(argv) == EXIT_CONFIGURATION
        assert main([*argv, "--force", "--parallel", "2"]) == EXIT_OK

    def test_report_json(
        self, campaign_out: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """The JSON report is printed and written next to the traces."""
        capsys.readouterr()
        assert main(["report", "--traces", str(campaign_out)]) == EXIT_OK
        printed = json.loads(capsys.readouterr().out)
        written = json.loads((campaign_out / "report.json").read_text())
        assert printed == written
        assert [r["fault_type"] for r in written["reports"]] == ["Hallucination"]
        assert written["reports"][0]["offline_fallback"] is True

    def test_report_table(self, campaign_out: Path, tmp_path: Path) -> None:
        """The table report can go to another directory."""
        reports = tmp_path / "reports"
        argv = ["report", "--traces", str(campaign_out), "--format", "table"]
        assert main([*argv, "--out", str(reports)]) == EXIT_OK
        assert (reports / "report.txt").read_text().startswith("fault_type")

    def test_unknown_format(self, campaign_out: Path) -> None:
        """Unknown report formats are configuration errors."""
        argv = ["report", "--traces", str(campaign_out), "--format", "yaml"]
        assert main(argv) == EXIT_CONFIGURATION

    def test_annotate_then_kappa(
        self, campaign_out: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Rule annotations cover injected traces and agree with themselves."""
        assert main(["annotate", "--traces", str(campaign_out)]) == EXIT_OK
        path = campaign_out / "annotations.jsonl"
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert {r["spec_id"] for r in records} == {"hallucinate"}
        assert [a["mode"] for a in read_manifest(campaign_out).annotations] == [
            "rule"
        ]

        # annotations sit among the traces; reports still replay cleanly
        assert main(["report", "--traces", str(campaign_out)]) == EXIT_OK

        capsys.readouterr()
        assert main(["annotate", "--kappa", str(path), str(path)]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["pooled"] == 1.0

    def test_kappa_over_different_traces(self, tmp_path: Path) -> None:
        """Annotation sets over different traces are an analysis error."""
        tag = BehaviorTag(outcomes=dict.fromkeys(FtTier, TierOutcome.INACTIVE))
        a = write_annotations(tmp_path / "a", [AnnotationRecord("s", "t1", None, tag)])
        b = write_annotations(tmp_path / "b", [AnnotationRecord("s", "t2", None, tag)])
        assert main(["annotate", "--kappa", str(a), str(b)]) == EXIT_ANALYSIS
