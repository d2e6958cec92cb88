"""Training orchestration: stage-1 supervised/adversarial training, the meta
fit, self-training rounds with pseudo-label regeneration, SGD with momentum
under a poly learning-rate schedule, and versioned checkpointing.

A run is deterministic end to end: batch composition is a pure function of
(seed, stage, iteration), parameter init derives from the config seed, and
all numeric work runs through fixed-order numpy reductions. Resuming from a
checkpoint therefore reproduces the uninterrupted run bit for bit.

Run directory layout:
    <run>/config.json
    <run>/checkpoints/*.ckpt
    <run>/pseudo/round_<i>/*.png
    <run>/metrics.jsonl      one JSON object per logging event, no timestamps
    <run>/eval_*.json        per-stage evaluation reports
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio
from . import ensemble
from . import nets as nets_mod
from . import translate
from .losses import LossWeights, StageBatch, stage_losses

CKPT_MAGIC = b"TRISEGCK"
CKPT_VERSION = 1

METHODS = ("ours", "sed", "mtri")


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the message carries the offending batch ids."""


@dataclass
class RunConfig:
    """All hyperparameters of one run; serialized into config.json and checkpoints."""
    seed: int = 0
    method: str = "ours"
    num_classes: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    lr0: float = 2.5e-4
    poly_power: float = 0.9
    momentum: float = 0.9
    d_lr: float = 1e-5
    batch_size: int = 4
    stage1_iters: int = 3000
    ssl_iters_per_round: int = 2000
    max_rounds: int = 2
    stop_gap: float = 0.3
    pseudo: ensemble.PseudoLabelConfig = field(default_factory=ensemble.PseudoLabelConfig)
    entropy_enabled: bool = True
    ssl_uses_translation: bool = False
    retrain_from_scratch: bool = False
    gen_mode: str = "nonsaturating"
    meta_features: str = "probs"
    alignment_rep: str = "t3"
    cosine_weight: float = 1.0
    log_every: int = 50
    data_root: str = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if min(self.lr0, self.d_lr) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.meta_features not in ("probs", "logits"):
            raise ValueError(f"meta_features must be 'probs' or 'logits', got {self.meta_features!r}")
        if self.alignment_rep not in ("t1", "t2", "t3"):
            raise ValueError(f"alignment_rep must be t1|t2|t3, got {self.alignment_rep!r}")

    @property
    def num_classifiers(self):
        return 1 if self.method == "sed" else 3

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["pseudo"] = self.pseudo.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "pseudo" in d:
            d["pseudo"] = ensemble.PseudoLabelConfig(**d["pseudo"])
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

def poly_lr(iteration, max_iter, lr0, power):
    """lr0 * (1 - iter/max_iter)^power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return lr0 * (1.0 - iteration / max_iter) ** power


def sgd_momentum_step(params, grads, velocities, lr, momentum=0.9):
    """v <- momentum*v + g; p <- p - lr*v, all in place."""
    for p, g, v in zip(params, grads, velocities):
        v *= momentum
        v += g
        p -= np.asarray(lr, dtype=p.dtype) * v


class SGDMomentum:
    """Momentum SGD over a named parameter dict; buffers start at zero."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocities = {}

    def step(self, named_params, lr):
        params, grads, vels = [], [], []
        for n, p in named_params.items():
            if p.grad is None:
                continue
            if n not in self.velocities:
                self.velocities[n] = np.zeros_like(p.data)
            params.append(p.data)
            grads.append(p.grad)
            vels.append(self.velocities[n])
        sgd_momentum_step(params, grads, vels, lr, self.momentum)


# ---------------------------------------------------------------------------
# Trainer state
# ---------------------------------------------------------------------------

@dataclass
class TrainerState:
    config: RunConfig
    nets: nets_mod.Nets
    optimizer: SGDMomentum
    meta: ensemble.MetaWeights = None
    translator: translate.Translator = None
    stage: str = "stage1"      # stage1 | round | done
    round_index: int = 0       # the round being trained when stage == "round"
    iteration: int = 0         # within the current training segment


def fresh_state(config, translator=None):
    net = nets_mod.init_params(config.seed, config.num_classes,
                               num_classifiers=config.num_classifiers)
    return TrainerState(config=config, nets=net, optimizer=SGDMomentum(config.momentum),
                        translator=translator)


def _seed_key(seed, tag):
    h = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# ---------------------------------------------------------------------------
# Training segments
# ---------------------------------------------------------------------------

def _build_batch(state, splits, mode, stage_tag, iteration, pseudo_map):
    cfg = state.config
    src_samples = dataio.batch_at(splits["source-train"], cfg.batch_size,
                                  _seed_key(cfg.seed, stage_tag + ":src"), iteration)
    tgt_samples = dataio.batch_at(splits["target-train"], cfg.batch_size,
                                  _seed_key(cfg.seed, stage_tag + ":tgt"), iteration)
    src_images = dataio.stack_images(src_samples)
    src_labels = dataio.stack_labels(src_samples).astype(np.int64)
    tgt_images_hwc = dataio.stack_images(tgt_samples)
    tgt_raw = nets_mod.nchw(tgt_images_hwc)

    triple = translate.make_triple(src_images, state.translator)
    reps = {name: nets_mod.nchw(triple.get(name)) for name in ("t1", "t2", "t3")}

    if cfg.method == "ours":
        source_reps = (reps["t1"], reps["t2"], reps["t3"])
        alignment = reps[cfg.alignment_rep]
    elif cfg.method == "sed":
        # the single classifier consumes the three translations in rotation
        source_reps = (reps[("t1", "t2", "t3")[iteration % 3]],)
        alignment = reps[cfg.alignment_rep]
    else:  # mtri: one shared representation, no translations
        source_reps = (reps["t1"],) * 3
        alignment = reps["t1"]

    if mode == "stage2" and cfg.ssl_uses_translation and cfg.method == "ours":
        # map the target toward each classifier's training domain: back to
        # source appearance for the first two heads, untouched for the third
        tgt_inv = nets_mod.nchw(state.translator.inverse(tgt_images_hwc))
        target_inputs = (tgt_inv, tgt_inv, tgt_raw)
    else:
        target_inputs = (tgt_raw,) * len(source_reps)

    pseudo = None
    if mode == "stage2":
        pseudo = np.stack([pseudo_map[s.sample_id] for s in tgt_samples]).astype(np.int64)

    batch = StageBatch(
        source_reps=source_reps,
        source_labels=src_labels,
        target_images=tgt_raw,
        target_inputs=target_inputs,
        alignment_rep=alignment,
        pseudo_labels=pseudo,
        batch_ids=tuple(s.sample_id for s in src_samples) + tuple(s.sample_id for s in tgt_samples),
    )
    if cfg.method == "ours":
        # routing invariant: classifier k trains on translation k, nothing else
        assert all(a is b for a, b in
                   zip(batch.source_reps, (reps["t1"], reps["t2"], reps["t3"])))
    return batch


def _train_segment(state, splits, *, mode, stage_tag, n_iters, pseudo_map=None,
                   metrics_fn=None, budget=None):
    """Optimize from state.iteration toward n_iters; an optional budget caps
    how many iterations this call may run (used for interruptible runs)."""
    cfg = state.config
    net = state.nets
    network_params = net.network_params()
    disc_params = net.discriminator_params()
    all_params = {**network_params, **disc_params}
    cosine_pair = None
    if cfg.method == "mtri":
        cosine_pair = (list(net.classifiers[0].params.values()),
                       list(net.classifiers[1].params.values()))

    end = n_iters if budget is None else min(n_iters, state.iteration + budget)
    guard_prev = ad.set_finite_guard(False)
    try:
        for it in range(state.iteration, end):
            lr = poly_lr(it, n_iters, cfg.lr0, cfg.poly_power)
            batch = _build_batch(state, splits, mode, stage_tag, it, pseudo_map)
            ad.zero_grads(all_params.values())
            loss_set = stage_losses(
                mode, net, batch, cfg.weights,
                entropy_enabled=cfg.entropy_enabled,
                gen_mode=cfg.gen_mode,
                cosine_pair=cosine_pair,
                cosine_weight=cfg.cosine_weight if cfg.method == "mtri" else 0.0,
            )
            components = loss_set.components()
            if not all(np.isfinite(v) for v in components.values()):
                bad = {k: v for k, v in components.items() if not np.isfinite(v)}
                raise TrainingDiverged(
                    f"non-finite loss at {stage_tag} iteration {it}: {bad}; "
                    f"batch ids {list(batch.batch_ids)}")

            ad.backward(loss_set.total)
            state.optimizer.step(network_params, lr)
            # the generator-side pass polluted D grads; reset before D's own update
            ad.zero_grads(disc_params.values())
            ad.backward(loss_set.d_loss)
            state.optimizer.step(disc_params, cfg.d_lr)
            ad.clear_tape()

            state.iteration = it + 1
            if metrics_fn and ((it + 1) % cfg.log_every == 0 or it + 1 == n_iters):
                metrics_fn({"event": "train", "stage": stage_tag,
                            "round": state.round_index, "iter": it + 1,
                            "lr": lr, **components})
    finally:
        ad.set_finite_guard(guard_prev)
    return state


def train_stage1(config, splits, translator, state=None, metrics_fn=None):
    """Stage-1 training: each classifier learns its own source translation;
    the discriminator aligns target features to the translated-source side."""
    if state is None:
        state = fresh_state(config, translator)
    state.translator = translator
    _train_segment(state, splits, mode="stage1", stage_tag="stage1",
                   n_iters=config.stage1_iters, metrics_fn=metrics_fn)
    return state


def meta_probs_for_split(state, split, batch_size=16):
    """Meta-learner probability maps over a split's raw images."""
    images = np.stack([s.image for s in split.samples])
    heads = nets_mod.predict_head_maps(state.nets, images, batch_size,
                                       kind=state.config.meta_features)
    return ensemble.meta_forward(heads[0], heads[1], heads[2], state.meta)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def _manifest(arrays, offset):
    entries = []
    for name in sorted(arrays):
        arr = arrays[name]
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    return entries, offset


def save_checkpoint(state, path):
    """Versioned container: magic, version, JSON header, raw little-endian payload."""
    params = {n: t.data for n, t in state.nets.all_params().items()}
    vels = dict(state.optimizer.velocities)
    pm, offset = _manifest(params, 0)
    vm, offset = _manifest(vels, offset)
    header = {
        "version": CKPT_VERSION,
        "config": state.config.to_dict(),
        "stage": state.stage,
        "round_index": state.round_index,
        "iteration": state.iteration,
        "meta_weights": state.meta.to_json() if state.meta else None,
        "translator": state.translator.to_json() if state.translator else None,
        "params": pm,
        "velocities": vm,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        for entries, source in ((pm, params), (vm, vels)):
            for entry in entries:
                f.write(np.ascontiguousarray(source[entry["name"]]).tobytes())
    return path


def load_checkpoint(path, expected_config=None):
    """Strict load; any mismatch aborts before touching state (never partial)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[20:20 + hlen].decode())
    config = RunConfig.from_dict(header["config"])
    if expected_config is not None:
        for fld in ("num_classes", "method", "batch_size"):
            have, want = getattr(config, fld), getattr(expected_config, fld)
            if have != want:
                raise ValueError(f"{path}: checkpoint field {fld!r} is {have}, expected {want}")

    payload_start = 20 + hlen
    expected_bytes = sum(e["nbytes"] for e in header["params"] + header["velocities"])
    if len(raw) - payload_start != expected_bytes:
        raise ValueError(f"{path}: corrupt payload "
                         f"({len(raw) - payload_start} bytes, expected {expected_bytes})")

    def read_block(entry):
        start = payload_start + entry["offset"]
        buf = raw[start:start + entry["nbytes"]]
        return np.frombuffer(buf, dtype=entry["dtype"]).reshape(entry["shape"]).copy()

    state = fresh_state(config)
    params = state.nets.all_params()
    for entry in header["params"]:
        name = entry["name"]
        if name not in params:
            raise ValueError(f"{path}: unknown parameter {name!r}")
        if list(params[name].data.shape) != entry["shape"]:
            raise ValueError(f"{path}: parameter {name!r} has shape {entry['shape']}, "
                             f"expected {list(params[name].data.shape)}")
        params[name].data = read_block(entry)
    for entry in header["velocities"]:
        state.optimizer.velocities[entry["name"]] = read_block(entry)

    state.stage = header["stage"]
    state.round_index = header["round_index"]
    state.iteration = header["iteration"]
    if header["meta_weights"]:
        state.meta = ensemble.MetaWeights.from_json(header["meta_weights"])
    if header["translator"]:
        state.translator = translate.translator_from_json(header["translator"])
    return state


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

class MetricsLog:
    def __init__(self, path, append=False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("")

    def __call__(self, event):
        with open(self.path, "a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")


def _save_pseudo(run_dir, round_index, split, label_maps):
    out = Path(run_dir) / "pseudo" / f"round_{round_index}"
    out.mkdir(parents=True, exist_ok=True)
    for sample, lab in zip(split.samples, label_maps):
        dataio._write_labels(out / f"{sample.sample_id}.png", lab)
    return out


def _load_pseudo(run_dir, round_index, split):
    out = Path(run_dir) / "pseudo" / f"round_{round_index}"
    if not out.is_dir():
        return None
    pseudo = {}
    for sample in split.samples:
        p = out / f"{sample.sample_id}.png"
        if not p.exists():
            raise FileNotFoundError(f"missing pseudo-label {p}")
        pseudo[sample.sample_id] = dataio._read_labels(p, None)
    return pseudo


def _fit_meta_stage1(state, splits, metrics_fn=None):
    """Fit meta weights on classifier predictions over the translated source
    reps (head k sees rep k) against the source ground truth."""
    cfg = state.config
    src = splits["source-train"]
    images = np.stack([s.image for s in src.samples])
    triple = translate.make_triple(images, state.translator)
    reps = (triple.t1, triple.t2, triple.t3)
    head_maps = [nets_mod.predict_head_maps(state.nets, reps[k], kind=cfg.meta_features,
                                            heads=(k,))[k]
                 for k in range(3)]
    labels = [s.labels for s in src.samples]
    triples = list(zip(head_maps[0], head_maps[1], head_maps[2]))
    result = ensemble.meta_fit(triples, labels)
    state.meta = result.weights
    if metrics_fn:
        metrics_fn({"event": "meta_fit", "stage": "stage1", "loss": result.final_loss,
                    "iterations": result.iterations, "converged": result.converged})
    return result


def _refit_meta(state, splits, pseudo_map, round_index, metrics_fn=None):
    """Refit on classifier predictions over raw target images against the
    previous round's pseudo-labels, warm-started from the current weights."""
    cfg = state.config
    tgt = splits["target-train"]
    images = np.stack([s.image for s in tgt.samples])
    heads = nets_mod.predict_head_maps(state.nets, images, kind=cfg.meta_features)
    triples = list(zip(heads[0], heads[1], heads[2]))
    pseudo = [pseudo_map[s.sample_id] for s in tgt.samples]
    result = ensemble.meta_refit(triples, pseudo, state.meta)
    state.meta = result.weights
    if metrics_fn:
        metrics_fn({"event": "meta_refit", "round": round_index, "loss": result.final_loss,
                    "iterations": result.iterations, "converged": result.converged})
    return result


def _generate_pseudo(state, splits, round_index, run_dir, metrics_fn=None):
    tgt = splits["target-train"]
    meta_probs = meta_probs_for_split(state, tgt)
    label_maps = ensemble.generate_pseudo_labels(list(meta_probs), state.config.pseudo)
    _save_pseudo(run_dir, round_index, tgt, label_maps)
    if metrics_fn:
        metrics_fn({"event": "pseudo_labels", "round": round_index,
                    "coverage": ensemble.pseudo_label_coverage(label_maps)})
    return {s.sample_id: lab for s, lab in zip(tgt.samples, label_maps)}


@dataclass
class PipelineResult:
    run_dir: str
    final_eval: dict           # wild-val report of the final model
    round_evals: list          # target-val reports: stage 1, then each round
    stopped_early: bool = False
    interrupted: bool = False


def run_full_pipeline(config, splits, out_dir, resume_state=None, max_train_iters=None):
    """The whole method: translator fit, stage 1, meta fit, pseudo-labels,
    then self-training rounds with meta refits, early-stopped when the
    meta-learner's lead over the best head drops below stop_gap.

    Baseline methods (sed, mtri) run stage 1 and evaluation only.
    `max_train_iters` caps training iterations for this invocation; when
    exhausted, an interrupt checkpoint is written and the run can be resumed
    bit-exactly in the same directory.
    """
    from . import evalkit  # local import; evalkit's ablation suite drives this module

    if resume_state is not None:
        state = resume_state
        config = state.config
    else:
        state = None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    metrics = MetricsLog(out / "metrics.jsonl", append=resume_state is not None)

    if state is None:
        state = fresh_state(config)
        src_imgs = [s.image for s in splits["source-train"].samples]
        tgt_imgs = [s.image for s in splits["target-train"].samples]
        state.translator = translate.fit_translator(src_imgs, tgt_imgs)

    budget = [max_train_iters]

    def spend(n_run_before, n_run_after):
        if budget[0] is not None:
            budget[0] -= n_run_after - n_run_before

    def interrupt():
        save_checkpoint(state, out / "checkpoints" / "interrupt.ckpt")
        return PipelineResult(str(out), {}, [], interrupted=True)

    def evaluate(split_role, tag):
        report = evalkit.evaluate_state(state, splits[split_role])
        (out / f"eval_{tag}_{split_role}.json").write_text(report.to_json())
        metrics({"event": "eval", "tag": tag, "split": split_role,
                 **{h: report.heads[h]["miou"] for h in report.heads}})
        return report

    round_evals = []
    stopped_early = False

    if state.stage == "stage1":
        before = state.iteration
        _train_segment(state, splits, mode="stage1", stage_tag="stage1",
                       n_iters=config.stage1_iters, metrics_fn=metrics, budget=budget[0])
        spend(before, state.iteration)
        if state.iteration < config.stage1_iters:
            return interrupt()
        save_checkpoint(state, out / "checkpoints" / "stage1.ckpt")
        if config.method != "ours":
            report_tv = evaluate("target-val", "stage1")
            report_wild = evaluate("wild-val", "final")
            state.stage = "done"
            save_checkpoint(state, out / "checkpoints" / "final.ckpt")
            return PipelineResult(str(out), report_wild.to_dict(), [report_tv.to_dict()])
        _fit_meta_stage1(state, splits, metrics)
        pseudo_map = _generate_pseudo(state, splits, 0, out, metrics)
        round_evals.append(evaluate("target-val", "stage1"))
        state.stage = "round"
        state.round_index = 1
        state.iteration = 0
        save_checkpoint(state, out / "checkpoints" / "round_0.ckpt")
    else:
        pseudo_map = None

    while state.stage == "round" and state.round_index <= config.max_rounds:
        rnd = state.round_index
        if pseudo_map is None:
            pseudo_map = _load_pseudo(out, rnd - 1, splits["target-train"])
            if pseudo_map is None:
                if state.iteration > 0:
                    raise FileNotFoundError(
                        f"pseudo-labels for round {rnd - 1} not found under {out}/pseudo "
                        f"and the round is mid-training; resume in the original run dir")
                # at a round boundary the maps are a pure function of the state
                pseudo_map = _generate_pseudo(state, splits, rnd - 1, out)
        if config.retrain_from_scratch and state.iteration == 0:
            reseed = _seed_key(config.seed, f"scratch-round{rnd}")
            state.nets = nets_mod.init_params(reseed, config.num_classes,
                                              num_classifiers=config.num_classifiers)
            state.optimizer = SGDMomentum(config.momentum)
        before = state.iteration
        _train_segment(state, splits, mode="stage2", stage_tag=f"round{rnd}",
                       n_iters=config.ssl_iters_per_round, pseudo_map=pseudo_map,
                       metrics_fn=metrics, budget=budget[0])
        spend(before, state.iteration)
        if state.iteration < config.ssl_iters_per_round:
            return interrupt()
        _refit_meta(state, splits, pseudo_map, rnd, metrics)
        pseudo_map = _generate_pseudo(state, splits, rnd, out, metrics)
        report = evaluate("target-val", f"round{rnd}")
        round_evals.append(report)

        gap = (report.heads["cm"]["miou"]
               - max(report.heads[f"c{k}"]["miou"] for k in (1, 2, 3)))
        state.round_index = rnd + 1
        state.iteration = 0
        save_checkpoint(state, out / "checkpoints" / f"round_{rnd}.ckpt")
        if gap < config.stop_gap and rnd < config.max_rounds:
            metrics({"event": "early_stop", "round": rnd, "gap": gap})
            stopped_early = True
            break

    state.stage = "done"
    final = evaluate("wild-val", "final")
    save_checkpoint(state, out / "checkpoints" / "final.ckpt")
    return PipelineResult(str(out), final.to_dict(),
                          [r.to_dict() for r in round_evals], stopped_early)
