"""Sparse multinomial-logistic-regression meta-learner over the three
classifier heads, plus pseudo-label generation by confidence thresholding.

The meta-learner owns exactly three per-class weight vectors (no bias): the
combined score of class c at a pixel is w1[c]*p1_c + w2[c]*p2_c + w3[c]*p3_c,
softmaxed over classes. Each output entry depends only on the three
classifier probabilities at the same pixel and class, which keeps the layer
sparse. Fitting minimizes masked cross-entropy over the 3K weights with
full-batch gradient descent and a backtracking line search; the objective is
convex in the weights, so the optimizer is deterministic and initialization
only affects the path, not the achievable loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE_ID = 255


@dataclass
class MetaWeights:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(-1)
        self.w3 = np.asarray(self.w3, dtype=np.float64).reshape(-1)
        if not (self.w1.shape == self.w2.shape == self.w3.shape):
            raise ValueError("w1, w2, w3 must have equal length")
        if not all(np.isfinite(v).all() for v in (self.w1, self.w2, self.w3)):
            raise ValueError("meta weights must be finite")

    @property
    def num_classes(self):
        return self.w1.shape[0]

    @classmethod
    def ones(cls, num_classes):
        return cls(np.ones(num_classes), np.ones(num_classes), np.ones(num_classes))

    def as_matrix(self):
        return np.stack([self.w1, self.w2, self.w3])

    @classmethod
    def from_matrix(cls, mat):
        return cls(mat[0], mat[1], mat[2])

    def to_json(self):
        return {"w1": self.w1.tolist(), "w2": self.w2.tolist(), "w3": self.w3.tolist()}

    @classmethod
    def from_json(cls, payload):
        return cls(payload["w1"], payload["w2"], payload["w3"])


@dataclass
class PseudoLabelConfig:
    """Confidence thresholding for pseudo-labels.

    Global mode keeps a pixel when its max probability reaches `threshold`
    (0 keeps everything). Per-class-quantile mode instead keeps, for each
    class, the most confident `class_fraction` of that class's argmax pixels
    across the whole stream, which protects rare classes from vanishing.
    """
    threshold: float = 0.9
    mode: str = "global"
    class_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")
        if self.mode not in ("global", "per-class-quantile"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.class_fraction <= 1.0:
            raise ValueError(f"class_fraction {self.class_fraction} outside (0, 1]")

    def to_dict(self):
        return {"threshold": self.threshold, "mode": self.mode,
                "class_fraction": self.class_fraction}


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def meta_forward(p1, p2, p3, w):
    """Combine three probability maps (..., K) into one via the meta weights."""
    if not (p1.shape == p2.shape == p3.shape):
        raise ValueError(f"probability map shapes differ: {p1.shape}, {p2.shape}, {p3.shape}")
    if p1.shape[-1] != w.num_classes:
        raise ValueError(f"maps have {p1.shape[-1]} classes, weights have {w.num_classes}")
    z = p1 * w.w1 + p2 * w.w2 + p3 * w.w3
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def collect_pixels(pred_triples, labels, ignore_id=IGNORE_ID):
    """Flatten streams of (p1,p2,p3) maps and label maps into fitting arrays.

    Returns (p_stack, y): p_stack is (3, P, K) float32 over counted pixels,
    y the (P,) class indices.
    """
    chunks, ys = [], []
    num_classes = None
    for (p1, p2, p3), lab in zip(pred_triples, labels):
        num_classes = p1.shape[-1]
        lab = np.asarray(lab).reshape(-1)
        keep = lab != ignore_id
        if not keep.any():
            continue
        stack = np.stack([p.reshape(-1, num_classes)[keep] for p in (p1, p2, p3)])
        chunks.append(stack.astype(np.float32))
        ys.append(lab[keep].astype(np.int64))
    if not chunks:
        return np.zeros((3, 0, num_classes or 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.concatenate(chunks, axis=1), np.concatenate(ys)


class _Objective:
    """Masked cross-entropy over the 3K meta weights, with reused buffers.

    The pixel count dwarfs the parameter count, so every evaluation is a few
    passes over (P, K) float64 arrays; preallocating them keeps the line
    search cheap.
    """

    def __init__(self, p_stack, y):
        self.p = np.ascontiguousarray(p_stack, dtype=np.float64)
        self.y = y
        self.rows = np.arange(y.size)
        p, k = self.p.shape[1], self.p.shape[2]
        self.z = np.empty((p, k))
        self.scratch = np.empty((p, k))

    def _softmax_parts(self, w_mat):
        """exp(z - shift) in self.scratch, plus row sums and log-sum-exp."""
        z = np.einsum("jpk,jk->pk", self.p, w_mat, out=self.z)
        # probabilities are <= 1, so |z| <= 3 max|w|; the max-subtraction pass
        # is only needed when the weights could overflow exp
        if np.abs(w_mat).max() * 3.0 < 50.0:
            np.exp(z, out=self.scratch)
            denom = self.scratch.sum(axis=1)
            lse = np.log(denom)
        else:
            m = z.max(axis=1)
            np.subtract(z, m[:, None], out=self.scratch)
            np.exp(self.scratch, out=self.scratch)
            denom = self.scratch.sum(axis=1)
            lse = m + np.log(denom)
        return z, denom, lse

    def loss(self, w_mat):
        z, _, lse = self._softmax_parts(w_mat)
        return float((lse - z[self.rows, self.y]).mean())

    def loss_grad(self, w_mat):
        z, denom, lse = self._softmax_parts(w_mat)
        loss = float((lse - z[self.rows, self.y]).mean())
        diff = self.scratch
        diff /= denom[:, None]
        diff[self.rows, self.y] -= 1.0
        diff /= self.y.size
        grad = np.einsum("pk,jpk->jk", diff, self.p)
        return loss, grad


def _ce_loss(p_stack, y, w_mat):
    return _Objective(p_stack, y).loss(np.asarray(w_mat, dtype=np.float64))


def _ce_loss_grad(p_stack, y, w_mat):
    return _Objective(p_stack, y).loss_grad(np.asarray(w_mat, dtype=np.float64))


@dataclass
class MetaFitResult:
    weights: MetaWeights
    losses: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")


def fit_meta_weights(p_stack, y, init=None, max_iters=500, rel_tol=1e-6):
    """Minimize cross-entropy over the 3K weights.

    Full-batch gradient descent with Armijo backtracking; the trial step uses
    the Barzilai-Borwein secant length, which converges orders of magnitude
    faster than a fixed step on this ill-conditioned (but convex) objective.
    Stops when the relative loss decrease falls below rel_tol.
    """
    if y.size == 0:
        raise ValueError("no labeled pixels to fit the meta-learner on")
    k = p_stack.shape[2]
    objective = _Objective(p_stack, y)
    w = (init.as_matrix() if init is not None else np.ones((3, k))).astype(np.float64).copy()
    loss, grad = objective.loss_grad(w)
    losses = [loss]
    prev_w = prev_grad = None
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        gnorm2 = float((grad * grad).sum())
        if gnorm2 == 0.0:
            converged = True
            break
        if prev_w is not None:
            dw = (w - prev_w).reshape(-1)
            dg = (grad - prev_grad).reshape(-1)
            curv = float(dw @ dg)
            t = float(dw @ dw) / curv if curv > 0 else step * 2.0
        else:
            t = step * 2.0
        t = min(max(t, 1e-12), 1e8)
        accepted = False
        for _ in range(60):
            cand = w - t * grad
            cand_loss = objective.loss(cand)
            if cand_loss <= loss - 1e-4 * t * gnorm2:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True
            break
        step = t
        prev_w, prev_grad = w, grad
        w = cand
        prev = loss
        loss, grad = objective.loss_grad(w)
        losses.append(loss)
        if (prev - loss) / max(prev, 1e-12) < rel_tol:
            converged = True
            break
    return MetaFitResult(weights=MetaWeights.from_matrix(w), losses=losses,
                         iterations=it, converged=converged)


def meta_fit(pred_triples, labels, init=None, max_iters=500, rel_tol=1e-6):
    """Fit meta weights on precomputed classifier probability maps.

    The segmentation network is frozen at this point: inputs are plain
    probability maps, labels the ground truth (or pseudo-labels); ignored
    pixels never enter the objective. Starts from all-ones weights.
    """
    p_stack, y = collect_pixels(pred_triples, labels)
    return fit_meta_weights(p_stack, y, init=init, max_iters=max_iters, rel_tol=rel_tol)


def meta_refit(pred_triples, pseudo_labels, prev_weights, max_iters=500, rel_tol=1e-6):
    """Refit on classifier predictions over raw target images against the
    previous round's pseudo-labels, warm-started from the previous weights."""
    p_stack, y = collect_pixels(pred_triples, pseudo_labels)
    if y.size == 0:
        raise ValueError("pseudo-labels are entirely ignored; nothing to refit on")
    return fit_meta_weights(p_stack, y, init=prev_weights,
                            max_iters=max_iters, rel_tol=rel_tol)


# ---------------------------------------------------------------------------
# Pseudo-labels
# ---------------------------------------------------------------------------

def generate_pseudo_labels(meta_probs, cfg):
    """Threshold meta probability maps (..., K) into label maps with 255 ignore."""
    maps = list(meta_probs)
    if cfg.mode == "global":
        out = []
        for p in maps:
            conf = p.max(axis=-1)
            lab = p.argmax(axis=-1).astype(np.uint8)
            lab[conf < cfg.threshold] = IGNORE_ID
            out.append(lab)
        return out

    # per-class-quantile: pool confidences over the whole stream first
    argmaxes = [p.argmax(axis=-1) for p in maps]
    confs = [p.max(axis=-1) for p in maps]
    k = maps[0].shape[-1]
    thresholds = np.zeros(k)
    for c in range(k):
        pooled = np.concatenate([cf[am == c].reshape(-1)
                                 for cf, am in zip(confs, argmaxes)])
        if pooled.size == 0:
            thresholds[c] = np.inf
            continue
        pooled = np.sort(pooled)[::-1]
        n_keep = max(1, int(cfg.class_fraction * pooled.size))
        thresholds[c] = pooled[n_keep - 1]
    out = []
    for am, cf in zip(argmaxes, confs):
        lab = am.astype(np.uint8)
        lab[cf < thresholds[am]] = IGNORE_ID
        out.append(lab)
    return out


def pseudo_label_coverage(label_maps, ignore_id=IGNORE_ID):
    total = sum(l.size for l in label_maps)
    kept = sum(int((l != ignore_id).sum()) for l in label_maps)
    return kept / total if total else 0.0


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def weight_report(w):
    """Per-class weight table: one row per class with the three weights."""
    return [{"class": c, "w1": float(w.w1[c]), "w2": float(w.w2[c]), "w3": float(w.w3[c])}
            for c in range(w.num_classes)]


def weight_report_csv(w):
    lines = ["class,w1,w2,w3"]
    for row in weight_report(w):
        lines.append(f"{row['class']},{row['w1']!r},{row['w2']!r},{row['w3']!r}")
    return "\n".join(lines) + "\n"


def weight_report_from_csv(text):
    rows = []
    lines = [ln for ln in text.strip().splitlines() if ln]
    for ln in lines[1:]:
        cls, w1, w2, w3 = ln.split(",")
        rows.append({"class": int(cls), "w1": float(w1), "w2": float(w2), "w3": float(w3)})
    return rows
