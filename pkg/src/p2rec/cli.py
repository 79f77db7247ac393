"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure. Log records
go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .artifacts import ArtifactError, Kind, load_artifact, save_artifact
from .config import ExperimentConfig, load_config
from .data import ConfigError
from .pipeline import STAGES, Pipeline, compare_runs
from .pregroup import fit_kmeans

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        payload = {"ts": round(record.created, 3), "level": record.levelname,
                   "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload)


def setup_logging(level=logging.INFO):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def _config(args) -> ExperimentConfig:
    if not getattr(args, "config", None):
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if getattr(args, "out", None) and args.command != "pregroup":
        cfg.output_dir = args.out
    return cfg


def cmd_run(args):
    cfg = _config(args)
    Pipeline(cfg).run(from_stage=args.from_stage, to_stage=args.to_stage)
    print(Path(cfg.output_dir) / "report" / "report.json")


def cmd_stage(args):
    cfg = _config(args)
    pipe = Pipeline(cfg)
    pipe.out.mkdir(parents=True, exist_ok=True)
    pipe.run_stage(args.command)
    pipe.write_manifest()


def cmd_pregroup(args):
    if args.embeddings:
        table = load_artifact(Kind.EMBEDDING_TABLE, args.embeddings)
        k = args.k
        seed = args.seed
        cfg = load_config(args.config) if args.config else None
        if k is None:
            k = cfg.pregroup.k if cfg else 16
        gm = fit_kmeans(table.matrix, k, seed=seed)
        out = Path(args.out or Path(args.embeddings).with_name("group_model.bin"))
        save_artifact(gm, out, cfg.hash() if cfg else "")
        print(out)
        return
    cfg = _config(args)
    if args.k is not None:
        cfg.pregroup.k = args.k
    pipe = Pipeline(cfg)
    pipe.run_stage("pregroup")
    pipe.write_manifest()


def cmd_eval(args):
    cfg = _config(args)
    pipe = Pipeline(cfg)
    if not args.model:
        pipe.run_stage("eval")
        return
    if not Path(args.model).exists():
        raise FileNotFoundError(f"model checkpoint {args.model} not found")
    frag = pipe.evaluate_checkpoint(args.model)
    out = Path(args.output or Path(args.model).with_suffix(".json"))
    out.write_text(frag.to_json())
    print(json.dumps(frag.runs[0]["metrics"], sort_keys=True))


def cmd_report(args):
    if args.compare:
        base_path, fused_path = args.compare
        for p in (base_path, fused_path):
            if not Path(p).exists():
                raise FileNotFoundError(f"report fragment {p} not found")
        base = load_artifact(Kind.METRICS_REPORT, base_path).runs
        fused = load_artifact(Kind.METRICS_REPORT, fused_path).runs
        for r in base:
            r["name"] = "base"
        for r in fused:
            r["name"] = "fused"
        ks = sorted({int(m.split("@")[1]) for r in base for m in r["metrics"]})
        lines = ["metric\tbase\tfused\tdelta\tp"]
        for k in ks:
            cmp = compare_runs(base + fused, "base", "fused", k)
            for m in (f"HR@{k}", f"NDCG@{k}"):
                b = sum(r["metrics"][m] for r in base) / len(base)
                f = sum(r["metrics"][m] for r in fused) / len(fused)
                p = cmp.get("p") if m.startswith("NDCG") else _hr_p(base, fused, k)
                lines.append(f"{m}\t{b:.4f}\t{f:.4f}\t{f - b:+.4f}\t{p:.3g}")
        table = "\n".join(lines)
        print(table)
        if args.output:
            Path(args.output).write_text(table + "\n")
        return
    cfg = _config(args)
    pipe = Pipeline(cfg)
    pipe.run_stage("report")
    pipe.write_manifest()


def _hr_p(base, fused, k):
    import numpy as np

    from .evaluation import ttest_two_sample

    def hits(runs):
        return np.concatenate([(np.asarray(r["ranks"]) <= k).astype(float) for r in runs])

    return ttest_two_sample(hits(fused), hits(base)).pvalue


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2rec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("config")
    p.add_argument("--from-stage", choices=STAGES)
    p.add_argument("--to-stage", choices=STAGES)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_run)

    for stage in ("pretrain", "sft", "augment", "train-fused"):
        p = sub.add_parser(stage, help=f"run only the {stage} stage")
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("pregroup", help="k-means pre-grouping of item embeddings")
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--embeddings", help="embedding table artifact; standalone mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="group model output path (standalone) or output dir")
    p.set_defaults(func=cmd_pregroup)

    p = sub.add_parser("eval", help="evaluate trained backbones")
    p.add_argument("--config", required=True)
    p.add_argument("--model", help="single checkpoint to evaluate")
    p.add_argument("--output", help="where to write the report fragment")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="assemble the report or compare two fragments")
    p.add_argument("--config")
    p.add_argument("--compare", nargs=2, metavar=("BASE", "FUSED"))
    p.add_argument("--output")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    setup_logging()
    log = logging.getLogger("p2rec")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    start = time.perf_counter()
    try:
        args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (ArtifactError, FileNotFoundError, RuntimeError, ValueError, FloatingPointError) as exc:
        log.error("stage failure: %s", exc)
        return EXIT_STAGE
    log.info("done in %.2fs", time.perf_counter() - start)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
