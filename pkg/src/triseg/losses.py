"""Training objectives: supervised cross-entropy, adversarial feature
alignment, Charbonnier-penalized entropy minimization, the cosine weight
discrepancy used by the tri-training baseline, and the per-stage assembly
that the trainer backpropagates.

Probability maps are (N, K, H, W) tensors from the classifier softmax;
label maps are (N, H, W) integer arrays where 255 marks ignored pixels.
All probabilities are clamped to >= 1e-12 before any log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

PROB_FLOOR = 1e-12
IGNORE_ID = 255


@dataclass
class LossWeights:
    lambda_adv: float = 0.001
    lambda_ent: float = 0.005
    eta: float = 2.0

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_ent < 0 or self.eta < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self):
        return {"lambda_adv": self.lambda_adv, "lambda_ent": self.lambda_ent, "eta": self.eta}


def seg_cross_entropy(pred, target, ignore_id=IGNORE_ID):
    """Mean -log p[true class] over non-ignored pixels.

    pred: (N,K,H,W) probability tensor; target: (N,H,W) int array with ids in
    [0,K) or ignore_id. Returns (loss, counted); counted == 0 yields a
    constant zero loss that contributes no gradient.
    """
    n, k, h, w = pred.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match prediction {(n, h, w)}")
    valid = target != ignore_id
    bad = np.unique(target[valid & ((target < 0) | (target >= k))])
    if bad.size:
        raise ValueError(f"target ids {bad.tolist()} outside [0, {k})")
    counted = int(valid.sum())
    if counted == 0:
        return ad.Tensor(np.zeros((), dtype=pred.dtype)), 0

    classes = np.arange(k).reshape(1, k, 1, 1)
    onehot = ((target[:, None] == classes) & valid[:, None]).astype(pred.dtype)
    picked = ad.mul(ad.log(ad.clamp_min(pred, PROB_FLOOR)), ad.Tensor(onehot))
    loss = ad.mul(ad.reduce_sum(picked), -1.0 / counted)
    return loss, counted


def adversarial_losses(d_logits_source_translated, d_logits_target,
                       d_logits_target_live=None, gen_mode="nonsaturating"):
    """Discriminator and generator-side losses from patch logits.

    d_loss = -[mean log s(d_src) + mean log(1 - s(d_tgt))]; the discriminator
    descends it, which is ascending the underlying real/fake objective. The
    generator term defaults to the non-saturating form -mean log s(d_tgt),
    pushing target features toward the source-translated side; "minimax"
    selects +mean log(1 - s(d_tgt)) instead.

    When the trainer separates graphs, the first two logits come from a pass
    over detached features (so d_loss cannot reach the encoder) and
    d_logits_target_live carries the live-feature pass for the generator term.
    """
    s_src = ad.sigmoid(d_logits_source_translated)
    s_tgt = ad.sigmoid(d_logits_target)
    d_loss = ad.mul(
        ad.add(ad.reduce_mean(ad.log(ad.clamp_min(s_src, PROB_FLOOR))),
               ad.reduce_mean(ad.log(ad.clamp_min(ad.sub(1.0, s_tgt), PROB_FLOOR)))),
        -1.0)

    live = d_logits_target_live if d_logits_target_live is not None else d_logits_target
    s_live = ad.sigmoid(live)
    if gen_mode == "nonsaturating":
        g_loss = ad.mul(ad.reduce_mean(ad.log(ad.clamp_min(s_live, PROB_FLOOR))), -1.0)
    elif gen_mode == "minimax":
        g_loss = ad.reduce_mean(ad.log(ad.clamp_min(ad.sub(1.0, s_live), PROB_FLOOR)))
    else:
        raise ValueError(f"unknown gen_mode {gen_mode!r}")
    return d_loss, g_loss


def entropy_charbonnier(pred, eta):
    """Charbonnier-penalized normalized entropy, averaged over pixels.

    Per pixel: h = Shannon entropy / log K in [0,1]; penalty (h^2 + 0.001^2)^eta.
    The 1/log K normalization sits inside the penalty, so one-hot maps score
    ~1e-12 and uniform maps (1 + 1e-6)^eta; the loss grows monotonically with
    entropy, penalizing high-entropy (uncertain) predictions hardest.
    """
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    k = pred.shape[1]
    p = ad.clamp_min(pred, PROB_FLOOR)
    plogp = ad.mul(p, ad.log(p))
    h = ad.mul(ad.reduce_sum(plogp, axis=1), -1.0 / math.log(k))
    phi = ad.power(ad.add(ad.mul(h, h), 1e-6), eta)
    return ad.reduce_mean(phi)


def _flat_dot(params_a, params_b):
    total = None
    for a, b in zip(params_a, params_b):
        term = ad.reduce_sum(ad.mul(ad.flatten(a), ad.flatten(b)))
        total = term if total is None else ad.add(total, term)
    return total


def cosine_discrepancy(params_c1, params_c2):
    """|cos angle| between two flattened parameter sets; 0 means orthogonal."""
    a = [params_c1] if isinstance(params_c1, ad.Tensor) else list(params_c1)
    b = [params_c2] if isinstance(params_c2, ad.Tensor) else list(params_c2)
    if len(a) != len(b) or any(x.size != y.size for x, y in zip(a, b)):
        raise ValueError("parameter sets must pair up with equal lengths")
    na = math.sqrt(sum(float((t.data.astype(np.float64) ** 2).sum()) for t in a))
    nb = math.sqrt(sum(float((t.data.astype(np.float64) ** 2).sum()) for t in b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_discrepancy: zero-norm parameter vector")
    dot = _flat_dot(a, b)
    norm_a = ad.power(_flat_dot(a, a), 0.5)
    norm_b = ad.power(_flat_dot(b, b), 0.5)
    return ad.div(ad.absolute(dot), ad.mul(norm_a, norm_b))


# ---------------------------------------------------------------------------
# Stage losses
# ---------------------------------------------------------------------------

@dataclass
class StageBatch:
    """Everything one optimization step consumes, already in NCHW float32.

    source_reps[k] is the translation routed to classifier k+1;
    target_inputs[k] is what classifier k+1 sees of the target batch (the raw
    images unless self-training runs with translation); alignment_rep is the
    source-side representation whose features face the discriminator. Blocks
    that are the same array object are encoded once.
    """
    source_reps: tuple
    source_labels: np.ndarray
    target_images: np.ndarray
    target_inputs: tuple
    alignment_rep: np.ndarray
    pseudo_labels: np.ndarray = None
    batch_ids: tuple = ()


@dataclass
class StageLossSet:
    """All loss components of one step; `total` is the network-side objective."""
    total: ad.Tensor
    d_loss: ad.Tensor
    seg_source: list
    entropy: list
    seg_pseudo: list
    g_loss: ad.Tensor
    cosine: ad.Tensor = None
    counted_source: int = 0
    counted_pseudo: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    cosine_weight: float = 0.0

    def components(self):
        out = {}
        for i, t in enumerate(self.seg_source):
            out[f"seg_src_c{i + 1}"] = t.item()
        for i, t in enumerate(self.entropy):
            out[f"ent_c{i + 1}"] = t.item()
        for i, t in enumerate(self.seg_pseudo):
            out[f"seg_pseudo_c{i + 1}"] = t.item()
        out["g_loss"] = self.g_loss.item()
        if self.cosine is not None:
            out["cosine"] = self.cosine.item()
        out["total"] = self.total.item()
        out["d_loss"] = self.d_loss.item()
        return out

    def weighted_component_sum(self):
        """Recompute total from logged components (bookkeeping identity)."""
        s = sum(t.item() for t in self.seg_source)
        s += self.weights.lambda_ent * sum(t.item() for t in self.entropy)
        s += sum(t.item() for t in self.seg_pseudo)
        s += self.weights.lambda_adv * self.g_loss.item()
        if self.cosine is not None:
            s += self.cosine_weight * self.cosine.item()
        return s


def stage_losses(mode, nets, batch, weights, *, entropy_enabled=True,
                 gen_mode="nonsaturating", cosine_pair=None, cosine_weight=0.0):
    """Assemble the per-stage objective for one batch.

    stage1: per classifier k, supervised cross-entropy on its own source
    representation, plus the weighted generator-side adversarial term (once)
    and the weighted entropy term on its target prediction. stage2 adds the
    pseudo-label cross-entropy on the target batch per classifier.
    Per-classifier losses are summed, not averaged, so the shared encoder
    receives gradients from all heads. d_loss is built on detached features
    and reported separately for the discriminator's own update.
    """
    if mode not in ("stage1", "stage2"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "stage2" and batch.pseudo_labels is None:
        raise ValueError("stage2 requires pseudo-labels from the previous round")
    heads = len(nets.classifiers)
    if len(batch.source_reps) != heads or len(batch.target_inputs) != heads:
        raise ValueError(f"batch provides {len(batch.source_reps)} source reps and "
                         f"{len(batch.target_inputs)} target inputs for {heads} classifiers")

    # encode every distinct input block in one batched pass
    blocks, starts = [], {}
    def register(arr):
        key = id(arr)
        if key not in starts:
            starts[key] = sum(b.shape[0] for b in blocks)
            blocks.append(arr)
        return key

    for arr in (*batch.source_reps, *batch.target_inputs,
                batch.alignment_rep, batch.target_images):
        register(arr)
    bsz = blocks[0].shape[0]
    big = ad.Tensor(np.concatenate(blocks, axis=0))
    feats = nets.encoder(big)

    def feat_of(arr):
        return ad.narrow(feats, 0, starts[id(arr)], arr.shape[0])

    need_target_preds = entropy_enabled or mode == "stage2"
    seg_source, entropy_terms, seg_pseudo = [], [], []
    counted_source = counted_pseudo = 0
    for k in range(heads):
        f_src = feat_of(batch.source_reps[k])
        if need_target_preds:
            # one classifier pass covers the source and target halves
            n_src = f_src.shape[0]
            both, _ = nets.classifiers[k](
                ad.concat([f_src, feat_of(batch.target_inputs[k])], axis=0))
            p_src = ad.narrow(both, 0, 0, n_src)
            p_tgt = ad.narrow(both, 0, n_src, both.shape[0] - n_src)
        else:
            p_src, _ = nets.classifiers[k](f_src)
            p_tgt = None
        loss_k, cnt = seg_cross_entropy(p_src, batch.source_labels)
        seg_source.append(loss_k)
        counted_source += cnt
        if p_tgt is not None:
            if entropy_enabled:
                entropy_terms.append(entropy_charbonnier(p_tgt, weights.eta))
            if mode == "stage2":
                loss_p, cnt_p = seg_cross_entropy(p_tgt, batch.pseudo_labels)
                seg_pseudo.append(loss_p)
                counted_pseudo += cnt_p

    f_align = feat_of(batch.alignment_rep)
    f_target = feat_of(batch.target_images)
    d_tgt_live = nets.discriminator(f_target)
    # one batched pass over detached features keeps d_loss away from the encoder
    n_align = f_align.shape[0]
    detached = ad.Tensor(np.concatenate([f_align.data, f_target.data], axis=0))
    d_det = nets.discriminator(detached)
    d_src_det = ad.narrow(d_det, 0, 0, n_align)
    d_tgt_det = ad.narrow(d_det, 0, n_align, f_target.shape[0])
    d_loss, g_loss = adversarial_losses(
        d_src_det, d_tgt_det, d_logits_target_live=d_tgt_live, gen_mode=gen_mode)

    total = seg_source[0]
    for t in seg_source[1:]:
        total = ad.add(total, t)
    for t in entropy_terms:
        total = ad.add(total, ad.mul(t, weights.lambda_ent))
    for t in seg_pseudo:
        total = ad.add(total, t)
    total = ad.add(total, ad.mul(g_loss, weights.lambda_adv))

    cosine = None
    if cosine_pair is not None:
        cosine = cosine_discrepancy(*cosine_pair)
        total = ad.add(total, ad.mul(cosine, cosine_weight))

    return StageLossSet(
        total=total, d_loss=d_loss, seg_source=seg_source, entropy=entropy_terms,
        seg_pseudo=seg_pseudo, g_loss=g_loss, cosine=cosine,
        counted_source=counted_source, counted_pseudo=counted_pseudo,
        weights=weights, cosine_weight=cosine_weight)
