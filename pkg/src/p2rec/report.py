"""Metrics report assembly and emission (JSON plus plot-ready CSV tables).

JSON schema (``schema_version`` 1)::

    {
      "schema_version": 1,
      "config_hash": str,
      "seeds": [int, ...],
      "runs": [{"name": str, "seed": int, "metrics": {"HR@5": float, ...},
                "groups": [{"bucket": int, "size": int, "HR@5": float|null, ...}]}],
      "comparison": {"metric": str, "base": str, "fused": str, "mean_base": float,
                     "mean_fused": float, "mean_diff": float, "t": float, "p": float},
      "category_agreement": {"C1": float, "C2": float, "C3": float},
      "counters": {"sft_forward_calls_per_epoch": int, "sft_train_users": int,
                   "augment_forward_calls": int, "instance_level_calls": int,
                   "instance_level_inference_calls": int},
      "timings": {"<stage>": seconds, ...},
      "llm_seconds": {"train_epoch": float, "inference": float,
                      "per_call": float},
      "analysis": {"sft_holdout_tv": float, "pregroup_ari": float,
                   "inferred_top1_vs_planted": float}
    }

CSV files written by :func:`emit_report`:

* ``metrics.csv``: run, seed, metric, value (one row per run and metric)
* ``timing.csv``: method, phase, seconds, estimated
* ``category_agreement.csv``: case, ratio
* ``activity_groups.csv``: run, seed, bucket, size, metric, value
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .artifacts import Kind

SCHEMA_VERSION = 1


@dataclass
class MetricsReport:
    KIND = Kind.METRICS_REPORT

    config_hash: str = ""
    seeds: list[int] = field(default_factory=list)
    runs: list[dict] = field(default_factory=list)
    comparison: dict = field(default_factory=dict)
    category_agreement: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    llm_seconds: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"report schema version {version}, expected {SCHEMA_VERSION}")
        return cls(**raw)

    def to_tensors(self):
        import numpy as np

        return {"json": np.frombuffer(self.to_json().encode(), dtype=np.uint8)}, {}

    @classmethod
    def from_tensors(cls, tensors, meta):
        return cls.from_json(tensors["json"].tobytes().decode())

    def run_metrics(self, name: str) -> list[dict]:
        return [r for r in self.runs if r["name"] == name]


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def emit_report(report: MetricsReport, out_dir, formats=("json", "csv")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(report.to_json())
        written.append(p)
    if "csv" in formats:
        rows = [(r["name"], r.get("seed", ""), m, v) for r in report.runs for m, v in r["metrics"].items()]
        _write_csv(out / "metrics.csv", ["run", "seed", "metric", "value"], rows)
        timing = []
        ls = report.llm_seconds
        if ls:
            timing.append(("P2Rec", "train", ls.get("train_epoch"), 0))
            timing.append(("P2Rec", "inference", ls.get("inference"), 0))
            per_call = ls.get("per_call")
            n_train = report.counters.get("instance_level_calls")
            n_infer = report.counters.get("instance_level_inference_calls")
            if per_call is not None and n_train:
                # comparator at the measured per-prompt cost: one prompt per interaction
                # in training, one per user sequence at inference
                timing.append(("instance-level", "train", per_call * n_train, 1))
                timing.append(("instance-level", "inference", per_call * (n_infer or 0), 1))
        _write_csv(out / "timing.csv", ["method", "phase", "seconds", "estimated"], timing)
        ca = report.category_agreement
        _write_csv(out / "category_agreement.csv", ["case", "ratio"],
                   [(c, ca[c]) for c in ("C1", "C2", "C3") if c in ca])
        grows = []
        for r in report.runs:
            for g in r.get("groups", []):
                for m, v in g.items():
                    if m not in ("bucket", "size"):
                        grows.append((r["name"], r.get("seed", ""), g["bucket"], g["size"], m, v))
        _write_csv(out / "activity_groups.csv", ["run", "seed", "bucket", "size", "metric", "value"], grows)
        written += [out / n for n in ("metrics.csv", "timing.csv", "category_agreement.csv",
                                      "activity_groups.csv")]
    return written
