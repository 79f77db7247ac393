import csv
import json

import pytest

from p2rec.artifacts import Kind, load_artifact
from p2rec.report import MetricsReport, emit_report


def sample_report():
    groups = [{"bucket": 0, "size": 2, "HR@5": 0.5, "NDCG@5": 0.3}, {"bucket": 1, "size": 0, "HR@5": None,
                                                                      "NDCG@5": None}]
    runs = [{"name": n, "seed": s, "metrics": {"HR@5": 0.1 * s, "NDCG@5": 0.05 * s}, "groups": groups}
            for n in ("base", "fused") for s in (1, 2, 3)]
    return MetricsReport(config_hash="cafe", seeds=[0], runs=runs,
                         category_agreement={"C1": 0.5, "C2": 0.3, "C3": 0.2},
                         counters={"instance_level_calls": 900, "instance_level_inference_calls": 100},
                         llm_seconds={"train_epoch": 1.5, "inference": 0.2, "per_call": 0.002})


def test_json_round_trip_through_loader(tmp_path):
    rep = sample_report()
    emit_report(rep, tmp_path)
    back = load_artifact(Kind.METRICS_REPORT, tmp_path / "report.json")
    assert back == rep


def test_schema_version_checked():
    raw = json.loads(sample_report().to_json())
    raw["schema_version"] = 2
    with pytest.raises(ValueError):
        MetricsReport.from_json(json.dumps(raw))


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_csv_tables(tmp_path):
    rep = sample_report()
    emit_report(rep, tmp_path)
    assert len(rows(tmp_path / "metrics.csv")) == 6 * 2
    ca = rows(tmp_path / "category_agreement.csv")
    assert [(r["case"], float(r["ratio"])) for r in ca] == [("C1", 0.5), ("C2", 0.3), ("C3", 0.2)]
    timing = rows(tmp_path / "timing.csv")
    phases = {(r["method"], r["phase"]) for r in timing}
    assert phases == {("P2Rec", "train"), ("P2Rec", "inference"),
                      ("instance-level", "train"), ("instance-level", "inference")}
    inst_train = next(r for r in timing if r["method"] == "instance-level" and r["phase"] == "train")
    assert float(inst_train["seconds"]) == pytest.approx(0.002 * 900)
    groups = rows(tmp_path / "activity_groups.csv")
    assert len(groups) == 6 * 2 * 2
    assert any(r["value"] == "" for r in groups)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(sample_report(), blocker / "sub")
