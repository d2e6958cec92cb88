"""Image translation between the source and target appearance domains.

The translator interface is deliberately small (forward, inverse, to_json)
so any image-to-image model can slot in; the shipped implementation is a
per-channel affine color map fitted by moment matching, which has an exact
analytic inverse. From one source image it yields the three representations
the classifiers train on: the original, the reconstruction through target
space, and the target-styled version. Label maps never pass through any of
this; translation touches pixels only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class Translator:
    """Interface for source<->target appearance mapping.

    Implementations map float images in [0,1] (any leading shape, trailing
    channel axis of size 3) and must be deterministic and immutable after
    fitting.
    """

    def forward(self, image):
        raise NotImplementedError

    def inverse(self, image):
        raise NotImplementedError

    def to_json(self):
        raise NotImplementedError


class AffineColorTranslator(Translator):
    """Per-channel y = scale * x + shift, clipped to [0,1], with exact inverse."""

    def __init__(self, scale, shift):
        self.scale = np.asarray(scale, dtype=np.float64).reshape(3)
        self.shift = np.asarray(shift, dtype=np.float64).reshape(3)

    def forward(self, image):
        out = image.astype(np.float64) * self.scale + self.shift
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def inverse(self, image):
        out = (image.astype(np.float64) - self.shift) / self.scale
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def to_json(self):
        return {"kind": "affine_color", "scale": self.scale.tolist(), "shift": self.shift.tolist()}

    @classmethod
    def from_json(cls, payload):
        if payload.get("kind") != "affine_color":
            raise ValueError(f"unsupported translator kind {payload.get('kind')!r}")
        return cls(payload["scale"], payload["shift"])


class IdentityTranslator(Translator):
    def forward(self, image):
        return image

    def inverse(self, image):
        return image

    def to_json(self):
        return {"kind": "identity"}


def translator_from_json(payload):
    if payload is None:
        return None
    kind = payload.get("kind")
    if kind == "affine_color":
        return AffineColorTranslator.from_json(payload)
    if kind == "identity":
        return IdentityTranslator()
    raise ValueError(f"unsupported translator kind {kind!r}")


def _channel_moments(images):
    # running sums in float64 keep the fit deterministic and exact
    n = 0
    s = np.zeros(3, dtype=np.float64)
    sq = np.zeros(3, dtype=np.float64)
    for img in images:
        flat = np.asarray(img, dtype=np.float64).reshape(-1, 3)
        n += flat.shape[0]
        s += flat.sum(axis=0)
        sq += (flat * flat).sum(axis=0)
    if n == 0:
        raise ValueError("cannot fit a translator on an empty corpus")
    mean = s / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    return mean, np.sqrt(var)


def fit_translator(source_images, target_images):
    """Moment-match source to target per channel; labels are never consumed.

    A zero-variance channel on either side gets its scale clamped to 1 with
    a warning, so degenerate corpora still produce a usable map.
    """
    src_mean, src_std = _channel_moments(source_images)
    tgt_mean, tgt_std = _channel_moments(target_images)
    scale = np.ones(3, dtype=np.float64)
    ok = (src_std > 1e-8) & (tgt_std > 1e-8)
    scale[ok] = tgt_std[ok] / src_std[ok]
    if not ok.all():
        warnings.warn("zero-variance channel while fitting translator; scale clamped to 1")
    shift = tgt_mean - scale * src_mean
    return AffineColorTranslator(scale, shift)


@dataclass
class TranslationTriple:
    """The three source representations: original, reconstruction, target-styled."""
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray

    def get(self, name):
        return {"t1": self.t1, "t2": self.t2, "t3": self.t3}[name]


def make_triple(image, translator):
    """t1 is the input itself; t3 its target-styled map; t2 the round trip back.

    Works on single images or batched stacks (translation is elementwise).
    Reconstruction differs from the input only where clipping occurred.
    """
    t3 = translator.forward(image)
    t2 = translator.inverse(t3)
    return TranslationTriple(t1=image, t2=t2, t3=t3)


def select_alignment_rep(triple, which="t3"):
    """Representation whose features face the domain discriminator (default t3)."""
    return triple.get(which)
