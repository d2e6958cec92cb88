"""Evaluation: confusion matrices, per-class IoU and mIoU, per-head reports,
the classifier-dominance table, and the ablation suite comparing the ensemble
method against the single encoder-decoder and tri-training baselines with
entropy and self-training-translation variants.

mIoU averages TP/(TP+FP+FN) over classes that occur in ground truth or
prediction; classes absent from both are excluded and flagged rather than
counted as zero. Ignored pixels (255) never enter the matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ensemble
from . import nets as nets_mod
from .dataio import IGNORE_ID


class ConfusionMatrix:
    """K x K integer counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt):
        """Add one prediction/ground-truth pair; ignored gt pixels are skipped."""
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        if (pred == IGNORE_ID).any():
            raise ValueError("predictions must be total: found ignore id in pred")
        if (pred >= self.num_classes).any():
            raise ValueError("prediction contains out-of-range class id")
        keep = gt != IGNORE_ID
        idx = self.num_classes * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass
class IouResult:
    per_class: np.ndarray      # NaN for classes excluded from the mean
    miou: float
    present: np.ndarray        # bool mask of classes that entered the mean


def iou_scores(cm):
    """Per-class IoU = TP/(TP+FP+FN); zero-denominator classes excluded, flagged."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    present = denom > 0
    if not present.any():
        raise ValueError("all classes absent; IoU undefined")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = tp[present] / denom[present]
    return IouResult(per_class=per_class, miou=float(per_class[present].mean()),
                     present=present)


@dataclass
class EvalReport:
    split: str
    heads: dict                # head name -> {"per_class": [...], "miou": float, ...}
    config_fingerprint: str = ""

    def to_dict(self):
        return {"split": self.split, "heads": self.heads,
                "config_fingerprint": self.config_fingerprint}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(split=d["split"], heads=d["heads"],
                   config_fingerprint=d.get("config_fingerprint", ""))


def _head_entry(iou):
    return {
        "per_class": [None if np.isnan(v) else float(v) for v in iou.per_class],
        "miou": iou.miou,
        "excluded_classes": [int(c) for c in np.flatnonzero(~iou.present)],
    }


def evaluate_predictions(pred_maps, gt_maps, num_classes):
    cm = ConfusionMatrix(num_classes)
    for pred, gt in zip(pred_maps, gt_maps):
        cm.accumulate(pred, gt)
    return iou_scores(cm)


def evaluate_state(state, split, batch_size=16):
    """Per-head report over a labeled split (classifiers plus the meta-learner)."""
    images = np.stack([s.image for s in split.samples])
    gts = [s.labels for s in split.samples]
    probs = nets_mod.predict_head_maps(state.nets, images, batch_size)
    heads = {}
    for i, p in enumerate(probs):
        heads[f"c{i + 1}"] = _head_entry(
            evaluate_predictions(p.argmax(axis=-1), gts, split.num_classes))
    if state.meta is not None and len(probs) == 3:
        feats = probs if state.config.meta_features == "probs" else \
            nets_mod.predict_head_maps(state.nets, images, batch_size, kind="logits")
        meta = ensemble.meta_forward(feats[0], feats[1], feats[2], state.meta)
        heads["cm"] = _head_entry(
            evaluate_predictions(meta.argmax(axis=-1), gts, split.num_classes))
    return EvalReport(split=split.role, heads=heads,
                      config_fingerprint=state.config.fingerprint())


def dominance_table(per_head_class_ious):
    """Count, per class, which head is strictly best; ties split equally.

    Input: {head: per-class iou list (None/NaN allowed)}. Returns
    {"counts": {head: float}, "ties": [class ids with ties]}.
    """
    heads = list(per_head_class_ious)
    if len(heads) < 2:
        raise ValueError("dominance table needs at least two heads")
    mat = np.stack([
        np.asarray([np.nan if v is None else v for v in per_head_class_ious[h]],
                   dtype=np.float64)
        for h in heads])
    counts = {h: 0.0 for h in heads}
    ties = []
    for c in range(mat.shape[1]):
        col = mat[:, c]
        if np.isnan(col).all():
            continue
        best = np.nanmax(col)
        winners = [heads[i] for i in range(len(heads))
                   if not np.isnan(col[i]) and col[i] == best]
        if len(winners) > 1:
            ties.append(c)
        for w in winners:
            counts[w] += 1.0 / len(winners)
    return {"counts": counts, "ties": ties}


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

POINT = 0.01   # one "mIoU point" on the percent scale

STAGE1_ARMS = [("sed", True), ("sed", False),
               ("mtri", True), ("mtri", False),
               ("ours", True), ("ours", False)]


def _arm_name(method, entropy):
    return f"{method}_{'ent' if entropy else 'noent'}"


def run_ablation_suite(splits, base_config, out_dir, seeds=(0, 1, 2)):
    """Run the comparison matrix and consolidate one CSV + JSON report.

    Per seed: six stage-1 arms ({sed, mtri, ours} x {entropy on, off}), then
    self-training rounds for the ensemble method with and without translation,
    both resumed from the shared entropy-on stage-1 checkpoint. Evaluations
    cover target-val and wild-val for every head. Individual run failures are
    recorded and the suite continues.
    """
    from . import trainer  # deferred: trainer's pipeline calls back into evalkit

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []

    def add_rows(report_dict, method, entropy, ssl_round, seed):
        for head, entry in report_dict["heads"].items():
            rows.append({"method": method, "head": head, "entropy": entropy,
                         "ssl_round": ssl_round, "split": report_dict["split"],
                         "seed": seed, "per_class": entry["per_class"],
                         "miou": entry["miou"]})

    for seed in seeds:
        for method, entropy in STAGE1_ARMS:
            cfg = trainer.RunConfig.from_dict({
                **base_config.to_dict(), "seed": seed, "method": method,
                "entropy_enabled": entropy, "max_rounds": 0,
            })
            run_dir = out / f"seed{seed}" / _arm_name(method, entropy)
            try:
                result = trainer.run_full_pipeline(cfg, splits, run_dir)
                add_rows(result.round_evals[0], method, entropy, 0, seed)
                add_rows(result.final_eval, method, entropy, 0, seed)
            except Exception as exc:  # noqa: BLE001 - suite must keep going
                failures.append({"seed": seed, "arm": _arm_name(method, entropy),
                                 "error": f"{type(exc).__name__}: {exc}"})

        # self-training continuations from the shared entropy-on checkpoint
        boundary = out / f"seed{seed}" / "ours_ent" / "checkpoints" / "round_0.ckpt"
        for ssl_with_t in (False, True):
            method_tag = "ours_ssl_t" if ssl_with_t else "ours"
            run_dir = out / f"seed{seed}" / ("ours_ssl_with_t" if ssl_with_t else "ours_ssl")
            try:
                state = trainer.load_checkpoint(boundary)
                state.config.ssl_uses_translation = ssl_with_t
                state.config.max_rounds = base_config.max_rounds
                state.config.stop_gap = base_config.stop_gap
                result = trainer.run_full_pipeline(None, splits, run_dir,
                                                   resume_state=state)
                for rnd, report in enumerate(result.round_evals, start=1):
                    add_rows(report, method_tag, True, rnd, seed)
                add_rows(result.final_eval, method_tag, True,
                         len(result.round_evals), seed)
            except Exception as exc:  # noqa: BLE001
                failures.append({"seed": seed, "arm": f"ssl_with_t={ssl_with_t}",
                                 "error": f"{type(exc).__name__}: {exc}"})

    report = consolidate_suite(rows, failures, list(seeds))
    (out / "comparison.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "comparison.csv").write_text(suite_rows_to_csv(rows))
    return report


def suite_rows_to_csv(rows):
    lines = ["method,head,entropy,ssl_round,split,class,iou,seed"]
    for r in rows:
        for c, v in enumerate(r["per_class"]):
            if v is None:
                continue
            lines.append(f"{r['method']},{r['head']},{int(r['entropy'])},{r['ssl_round']},"
                         f"{r['split']},{c},{v!r},{r['seed']}")
        lines.append(f"{r['method']},{r['head']},{int(r['entropy'])},{r['ssl_round']},"
                     f"{r['split']},ALL,{r['miou']!r},{r['seed']}")
    return "\n".join(lines) + "\n"


def _mean(vals):
    return float(np.mean(vals)) if vals else None


def suite_miou(rows, seeds, *, method, head, split, ssl_round, entropy=None,
               reduce_heads=None):
    """Seed-averaged mIoU for one arm; reduce_heads='best' takes the per-seed
    best classifier head before averaging."""
    per_seed = []
    for seed in seeds:
        cand = [r["miou"] for r in rows
                if r["method"] == method and r["split"] == split
                and r["ssl_round"] == ssl_round and r["seed"] == seed
                and (entropy is None or r["entropy"] == entropy)
                and (r["head"] == head if reduce_heads is None
                     else r["head"].startswith("c") and r["head"] != "cm")]
        if not cand:
            continue
        per_seed.append(max(cand) if reduce_heads == "best" else cand[0])
    return _mean(per_seed)


def consolidate_suite(rows, failures, seeds):
    """Seed-averaged summary plus the directional assertions of the study."""
    def m(**kw):
        return suite_miou(rows, seeds, **kw)

    last_round = max([r["ssl_round"] for r in rows], default=0)
    summary = {
        "stage1_target": {
            "ours_cm_ent": m(method="ours", head="cm", split="target-val",
                             ssl_round=0, entropy=True),
            "ours_cm_noent": m(method="ours", head="cm", split="target-val",
                               ssl_round=0, entropy=False),
            "ours_best_head_ent": m(method="ours", head=None, split="target-val",
                                    ssl_round=0, entropy=True, reduce_heads="best"),
            "sed_ent": m(method="sed", head="c1", split="target-val",
                         ssl_round=0, entropy=True),
            "sed_noent": m(method="sed", head="c1", split="target-val",
                           ssl_round=0, entropy=False),
            "mtri_best_head_ent": m(method="mtri", head=None, split="target-val",
                                    ssl_round=0, entropy=True, reduce_heads="best"),
        },
        "ssl_target_cm": {
            f"round{r}": m(method="ours", head="cm", split="target-val",
                           ssl_round=r, entropy=True)
            for r in range(0, last_round + 1)
        },
        "ssl_with_t_target_cm": {
            f"round{r}": m(method="ours_ssl_t", head="cm", split="target-val",
                           ssl_round=r, entropy=True)
            for r in range(1, last_round + 1)
        },
        "wild": {
            "ours_cm_final": m(method="ours", head="cm", split="wild-val",
                               ssl_round=last_round, entropy=True),
            "ours_cm_stage1": m(method="ours", head="cm", split="wild-val",
                                ssl_round=0, entropy=True),
            "sed_ent": m(method="sed", head="c1", split="wild-val",
                         ssl_round=0, entropy=True),
        },
    }

    s1 = summary["stage1_target"]
    ssl = summary["ssl_target_cm"]
    sslt = summary["ssl_with_t_target_cm"]
    wild = summary["wild"]

    def ok(cond):
        return bool(cond) if cond is not None else False

    def sub(a, b):
        return None if a is None or b is None else a - b

    # per-round dominance counts for the ensemble arm, averaged over seeds
    dominance = {}
    for rnd in range(0, last_round + 1):
        per_seed = []
        for seed in seeds:
            heads = {}
            for r in rows:
                if (r["method"] == "ours" and r["split"] == "target-val"
                        and r["ssl_round"] == rnd and r["seed"] == seed
                        and r["entropy"] and r["head"] != "cm"):
                    heads[r["head"]] = r["per_class"]
            if len(heads) >= 2:
                per_seed.append(dominance_table(heads)["counts"])
        if per_seed:
            dominance[f"round{rnd}"] = {
                h: float(np.mean([c[h] for c in per_seed]))
                for h in per_seed[0]
            }

    assertions = {
        "ours_cm_beats_sed": ok(sub(s1["ours_cm_ent"], s1["sed_ent"]) is not None
                                and s1["ours_cm_ent"] > s1["sed_ent"]),
        "ours_cm_beats_mtri": ok(s1["ours_cm_ent"] is not None
                                 and s1["mtri_best_head_ent"] is not None
                                 and s1["ours_cm_ent"] > s1["mtri_best_head_ent"]),
        "ours_cm_near_best_head": ok(
            sub(s1["ours_cm_ent"], s1["ours_best_head_ent"]) is not None
            and s1["ours_cm_ent"] >= s1["ours_best_head_ent"] - 0.5 * POINT),
        "ssl_round1_gain_2pts": ok(
            sub(ssl.get("round1"), ssl.get("round0")) is not None
            and ssl["round1"] - ssl["round0"] >= 2.0 * POINT),
        "ssl_round2_holds": ok(
            sub(ssl.get("round2"), ssl.get("round1")) is not None
            and ssl["round2"] >= ssl["round1"] - 0.5 * POINT),
        "entropy_helps": ok(
            sub(s1["ours_cm_ent"], s1["ours_cm_noent"]) is not None
            and s1["ours_cm_ent"] >= s1["ours_cm_noent"] - 0.5 * POINT),
        "wild_generalization": ok(
            sub(wild["ours_cm_final"], wild["sed_ent"]) is not None
            and wild["ours_cm_final"] >= wild["sed_ent"]),
        "ssl_translation_no_gain": ok(
            sslt.get(f"round{last_round}") is not None
            and ssl.get(f"round{last_round}") is not None
            and sslt[f"round{last_round}"] <= ssl[f"round{last_round}"] + 0.3 * POINT),
    }

    summary["dominance"] = dominance
    return {"seeds": seeds, "rows": rows, "failures": failures,
            "summary": summary, "assertions": assertions}


# ---------------------------------------------------------------------------
# Run-directory report rendering
# ---------------------------------------------------------------------------

def render_report(run_dir, out_dir):
    """Render metrics.jsonl and the fitted meta weights into CSV plot data."""
    run = Path(run_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    metrics_path = run / "metrics.jsonl"
    if metrics_path.exists():
        events = [json.loads(line) for line in metrics_path.read_text().splitlines() if line]
        train_events = [e for e in events if e.get("event") == "train"]
        if train_events:
            keys = sorted({k for e in train_events for k in e} - {"event"})
            lines = [",".join(keys)]
            for e in train_events:
                lines.append(",".join(repr(e[k]) if isinstance(e.get(k), float)
                                      else str(e.get(k, "")) for k in keys))
            (out / "train_curve.csv").write_text("\n".join(lines) + "\n")
            written.append("train_curve.csv")
        eval_events = [e for e in events if e.get("event") == "eval"]
        if eval_events:
            keys = sorted({k for e in eval_events for k in e} - {"event"})
            lines = [",".join(keys)]
            for e in eval_events:
                lines.append(",".join(repr(e[k]) if isinstance(e.get(k), float)
                                      else str(e.get(k, "")) for k in keys))
            (out / "eval_curve.csv").write_text("\n".join(lines) + "\n")
            written.append("eval_curve.csv")

    final_ckpt = run / "checkpoints" / "final.ckpt"
    if final_ckpt.exists():
        from . import trainer
        state = trainer.load_checkpoint(final_ckpt)
        if state.meta is not None:
            (out / "meta_weights.csv").write_text(
                ensemble.weight_report_csv(state.meta))
            written.append("meta_weights.csv")
    return written
