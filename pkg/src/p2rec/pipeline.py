"""Stage-by-stage orchestration over versioned artifacts in one output directory."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from .artifacts import Kind, load_artifact, save_artifact
from .augment import GatedFusion, category_agreement, embed_all_items
from .backbone import IDEmbedding, ModelCheckpoint, build_model, train_backbone
from .config import ExperimentConfig
from .data import InteractionDataset, generate_synthetic, load_interactions
from .evaluation import activity_buckets, evaluate, grouped_evaluate, ttest_two_sample
from .pregroup import GroupModel, build_targets, fit_kmeans
from .preference import (AdapterCheckpoint, PreferenceModel, build_preference_model,
                         pretrain_proxy_base, sft_train)
from .report import MetricsReport, emit_report

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "pregroup", "sft", "augment", "train-fused", "eval", "report")


class StageError(RuntimeError):
    pass


def best_label_match(pred: np.ndarray, truth: np.ndarray, K: int) -> float:
    """Accuracy of ``pred`` against ``truth`` under the best one-to-one relabelling."""
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (pred, truth), 1)
    rows, cols = linear_sum_assignment(-conf)
    return float(conf[rows, cols].sum() / len(pred))


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self._data = None

    # artifact paths
    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageError(f"missing upstream artifact {p}; run the stage that produces it first")
        return p

    def save(self, obj, name: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        save_artifact(obj, p, self.cfg.hash())
        return p

    def load(self, kind: Kind, name: str):
        return load_artifact(kind, self.require(name))

    def write_json(self, name: str, payload):
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True))

    def read_json(self, name: str):
        return json.loads(self.require(name).read_text())

    def dataset(self) -> tuple[InteractionDataset, object]:
        if self._data is None:
            d = self.cfg.data
            if d.source == "synthetic":
                self._data = generate_synthetic(d.synthetic_spec(self.cfg.stage_seed("data")))
            else:
                self._data = (load_interactions(d.path, d.format), None)
        return self._data

    def _record_time(self, stage: str, seconds: float):
        p = self.path("timings.json")
        timings = json.loads(p.read_text()) if p.exists() else {}
        timings[stage] = seconds
        self.write_json("timings.json", timings)

    def run(self, from_stage: str | None = None, to_stage: str | None = None):
        start = STAGES.index(from_stage) if from_stage else 0
        stop = STAGES.index(to_stage) + 1 if to_stage else len(STAGES)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(self.cfg.to_text())
        for stage in STAGES[start:stop]:
            self.run_stage(stage)
        self.write_manifest()

    def run_stage(self, stage: str):
        logger.info("stage %s starting", stage)
        t = time.perf_counter()
        getattr(self, "stage_" + stage.replace("-", "_"))()
        elapsed = time.perf_counter() - t
        self._record_time(stage, elapsed)
        logger.info("stage %s done in %.2fs", stage, elapsed)

    # stages
    def stage_pretrain(self):
        data, planted = self.dataset()
        self.path("interactions.tsv").write_text(data.to_tsv())
        if planted is not None:
            rows = "".join(f"{v}\t{planted.labels[v]}\t{planted.corrupted[v]}\n" for v in range(data.num_items))
            self.path("planted_labels.tsv").write_text("item\tlabel\tcorrupted\n" + rows)
        model, table, log = train_backbone(data, self.cfg.backbone, seed=self.cfg.stage_seed("pretrain"))
        self.save(ModelCheckpoint.from_module(model, arch=self.cfg.backbone.arch, fused=False),
                  "backbone_pretrained.ckpt")
        self.save(table, "item_embeddings.bin")
        self.write_json("pretrain_log.json", log.as_dict())

    def stage_pregroup(self):
        data, planted = self.dataset()
        table = self.load(Kind.EMBEDDING_TABLE, "item_embeddings.bin")
        pg = self.cfg.pregroup
        if pg.source == "planted":
            gm = GroupModel.from_labels(table.matrix, planted.corrupted, self.cfg.data.num_categories)
        else:
            gm = fit_kmeans(table.matrix, pg.k, seed=self.cfg.stage_seed("pregroup"),
                            restarts=pg.restarts, max_iter=pg.max_iter)
        self.save(gm, "group_model.bin")
        self.save(build_targets(data, gm, distinct=pg.distinct), "targets.bin")

    def _preference_model(self, gm_K: int) -> PreferenceModel:
        table = self.load(Kind.EMBEDDING_TABLE, "item_embeddings.bin")
        model = build_preference_model(table.matrix, gm_K, self.cfg.proxy, seed=0)
        self.load(Kind.MODEL_CHECKPOINT, "proxy_base.ckpt").load_into(model)
        model.lm.freeze()
        return model

    def stage_sft(self):
        data, _ = self.dataset()
        table = self.load(Kind.EMBEDDING_TABLE, "item_embeddings.bin")
        targets = self.load(Kind.PREFERENCE_TARGETS, "targets.bin")
        model, plog = pretrain_proxy_base(data, table.matrix, targets.K, self.cfg.proxy,
                                          seed=self.cfg.stage_seed("proxy-base"))
        self.save(ModelCheckpoint.from_module(model, K=targets.K), "proxy_base.ckpt")
        slog = sft_train(model, data, targets, self.cfg.sft, self.cfg.lora, seed=self.cfg.stage_seed("sft"))
        self.save(AdapterCheckpoint.from_model(model, K=targets.K), "adapter.bin")
        hold = np.array(slog.holdout_users, dtype=np.int64)
        tv = float("nan")
        if len(hold):
            with torch.no_grad():
                pred = model(model.prompts([data.train(int(u)) for u in hold])).numpy()
            tv = float(0.5 * np.abs(pred - targets.dist[np.searchsorted(targets.users, hold)]).sum(1).mean())
        with open(self.path("sft_log.jsonl"), "w") as fh:
            for entry in plog:
                fh.write(json.dumps({"phase": "pretrain", **entry}) + "\n")
            for entry in slog.epochs:
                fh.write(json.dumps({"phase": "sft", **entry}) + "\n")
        summary = slog.as_dict()
        summary.pop("epochs")
        summary["holdout_tv"] = tv
        self.write_json("sft_summary.json", summary)

    def stage_augment(self):
        data, _ = self.dataset()
        gm = self.load(Kind.GROUP_MODEL, "group_model.bin")
        model = self._preference_model(gm.K)
        model.lm.insert_lora(self.cfg.lora)
        self.load(Kind.ADAPTER_CHECKPOINT, "adapter.bin").load_into(model)
        t = time.perf_counter()
        enhanced = embed_all_items(model, data.num_items)
        self.write_json("augment_timing.json", {"seconds": time.perf_counter() - t,
                                                "forward_calls": enhanced.forward_calls})
        self.save(enhanced, "enhanced.bin")

    def stage_train_fused(self):
        data, _ = self.dataset()
        enhanced = self.load(Kind.ENHANCED_ITEMS, "enhanced.bin")
        logs = {}
        for r in range(self.cfg.eval.repeats):
            seed = self.cfg.stage_seed(f"train-fused/{r}")
            base, _, lb = train_backbone(data, self.cfg.backbone, seed=seed)
            self.save(ModelCheckpoint.from_module(base, arch=self.cfg.backbone.arch, fused=False, seed=seed),
                      f"models/base_r{r}.ckpt")
            fused, _, lf = train_backbone(data, self.cfg.backbone, seed=seed, enhanced=enhanced,
                                          fusion=self.cfg.fusion)
            self.save(ModelCheckpoint.from_module(fused, arch=self.cfg.backbone.arch, fused=True, seed=seed),
                      f"models/fused_r{r}.ckpt")
            logs[f"base_r{r}"], logs[f"fused_r{r}"] = lb.as_dict(), lf.as_dict()
        self.write_json("models/train_logs.json", logs)

    def stage_eval(self):
        for r in range(self.cfg.eval.repeats):
            for name in ("base", "fused"):
                frag = self.evaluate_checkpoint(self.require(f"models/{name}_r{r}.ckpt"), name)
                self.path(f"eval/{name}_r{r}.json").parent.mkdir(parents=True, exist_ok=True)
                self.path(f"eval/{name}_r{r}.json").write_text(frag.to_json())

    def evaluate_checkpoint(self, path, name: str | None = None) -> MetricsReport:
        data, _ = self.dataset()
        ckpt = load_artifact(Kind.MODEL_CHECKPOINT, path)
        model = load_backbone(ckpt, self.cfg, data.num_items)
        ev = self.cfg.eval
        res = evaluate(model.score_batch, data, ks=ev.ks, mask_history=ev.mask_history)
        groups = grouped_evaluate(res, activity_buckets(data.train_lengths(), ev.buckets))
        run = {"name": name or Path(path).stem, "seed": ckpt.meta.get("seed"), "metrics": res.metrics(),
               "groups": groups, "users": res.users.tolist(), "ranks": res.ranks.tolist()}
        return MetricsReport(config_hash=self.cfg.hash(), seeds=[self.cfg.seed], runs=[run])

    def stage_report(self):
        data, planted = self.dataset()
        runs = []
        for r in range(self.cfg.eval.repeats):
            for name in ("base", "fused"):
                runs += MetricsReport.from_json(self.require(f"eval/{name}_r{r}.json").read_text()).runs
        report = MetricsReport(config_hash=self.cfg.hash(), seeds=[self.cfg.seed], runs=runs)
        report.comparison = compare_runs(runs, "base", "fused", max(self.cfg.eval.ks))

        gm = self.load(Kind.GROUP_MODEL, "group_model.bin")
        enhanced = self.load(Kind.ENHANCED_ITEMS, "enhanced.bin")
        c1, c2, c3 = category_agreement(enhanced.G, gm)
        report.category_agreement = {"C1": c1, "C2": c2, "C3": c3}

        sft = self.read_json("sft_summary.json")
        epochs = [json.loads(line) for line in self.require("sft_log.jsonl").read_text().splitlines()]
        sft_epochs = [e for e in epochs if e["phase"] == "sft"]
        aug = self.read_json("augment_timing.json")
        report.counters = {
            "sft_forward_calls_per_epoch": sft_epochs[0]["forward_calls"],
            "sft_train_forward_calls_per_epoch": sft_epochs[0]["train_forward_calls"],
            "sft_train_users": sft["train_users"],
            "augment_forward_calls": aug["forward_calls"],
            "instance_level_calls": data.num_interactions,
            "instance_level_inference_calls": data.num_users,
        }
        report.timings = self.read_json("timings.json")
        report.llm_seconds = {
            "train_epoch": float(np.mean([e["seconds"] for e in sft_epochs])),
            "inference": aug["seconds"],
            "per_call": aug["seconds"] / max(aug["forward_calls"], 1),
        }
        report.analysis = {"sft_holdout_tv": sft["holdout_tv"]}
        if planted is not None:
            K = max(gm.K, self.cfg.data.num_categories)
            report.analysis["pregroup_ari"] = float(adjusted_rand_score(planted.labels, gm.assignment))
            report.analysis["inferred_top1_vs_planted"] = best_label_match(
                enhanced.G.argmax(1), planted.labels, K)
        emit_report(report, self.path("report"))

    def write_manifest(self):
        files = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name not in ("manifest.json", "timings.json"):
                files[str(p.relative_to(self.out))] = hashlib.sha256(p.read_bytes()).hexdigest()
        timings_path = self.path("timings.json")
        manifest = {
            "config_hash": self.cfg.hash(),
            "root_seed": self.cfg.seed,
            "stage_seeds": {s: self.cfg.stage_seed(s) for s in STAGES},
            "artifacts": files,
            "timings": json.loads(timings_path.read_text()) if timings_path.exists() else {},
        }
        self.write_json("manifest.json", manifest)


def load_backbone(ckpt: ModelCheckpoint, cfg: ExperimentConfig, num_items: int):
    """Rebuild a base or fused backbone from its checkpoint."""
    bcfg = cfg.backbone
    items = IDEmbedding(num_items, bcfg.dim)
    tie = True
    if ckpt.meta.get("fused"):
        H = ckpt.state["items.H"]
        items = GatedFusion(items, H, cfg.fusion)
        tie = cfg.fusion.tie_output
    model = build_model(bcfg, num_items, items, tie_output=tie)
    ckpt.load_into(model)
    model.eval()
    return model


def compare_runs(runs: list[dict], base: str, fused: str, k: int) -> dict:
    """Mean NDCG@k difference with Welch tests over seeds and over users."""
    metric = f"NDCG@{k}"
    b = [r for r in runs if r["name"] == base]
    f = [r for r in runs if r["name"] == fused]
    out = {"metric": metric, "base": base, "fused": fused}
    if not b or not f:
        return out
    mb = [r["metrics"][metric] for r in b]
    mf = [r["metrics"][metric] for r in f]
    out.update(mean_base=float(np.mean(mb)), mean_fused=float(np.mean(mf)),
               mean_diff=float(np.mean(mf) - np.mean(mb)))
    if len(mb) >= 2 and len(mf) >= 2:
        t = ttest_two_sample(mf, mb)
        out.update(t_seeds=t.statistic, p_seeds=t.pvalue,
                   paired_diffs=[float(x - y) for x, y in zip(mf, mb)])

    def per_user(runs_):
        vals = []
        for r in runs_:
            ranks = np.asarray(r["ranks"])
            vals.append(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0))
        return np.concatenate(vals)

    t = ttest_two_sample(per_user(f), per_user(b))
    out.update(t=t.statistic, p=t.pvalue)
    return out
