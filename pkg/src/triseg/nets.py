"""Segmentation network (shared encoder + three classifier heads) and the
feature-level domain discriminator, built on the in-package autodiff engine.

Everything is sized for the synthetic benchmark: a four-block conv encoder
with x4 spatial downsampling and 64 output channels, classifier heads of two
3x3 convs plus a 1x1 projection to class logits with bilinear upsampling back
to input resolution, and a five-layer stride-2 patch discriminator that only
ever sees encoder features, never raw images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FEATURE_CHANNELS = 64
ENCODER_CHANNELS = (16, 32, 64, FEATURE_CHANNELS)
ENCODER_STRIDES = (2, 2, 1, 1)   # downsample early; total spatial reduction x4
DISCRIMINATOR_CHANNELS = (4, 8, 16, 32, 1)
LEAKY_SLOPE = 0.2
MIN_DISC_INPUT = 4


def _he_conv(rng, out_ch, in_ch, k, dtype=np.float32):
    fan_in = in_ch * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
    return ad.Tensor(w.astype(dtype), requires_grad=True)


def _zero_bias(out_ch, dtype=np.float32):
    return ad.Tensor(np.zeros((1, out_ch, 1, 1), dtype=dtype), requires_grad=True)


class ConvNet:
    """A plain stack of conv layers with named parameters."""

    def __init__(self, name):
        self.name = name
        self.params = {}

    def _add_conv(self, rng, idx, out_ch, in_ch, k):
        self.params[f"conv{idx}.w"] = _he_conv(rng, out_ch, in_ch, k)
        self.params[f"conv{idx}.b"] = _zero_bias(out_ch)

    def named_params(self):
        return {f"{self.name}.{k}": v for k, v in self.params.items()}

    def param_vector(self):
        """All weights flattened and concatenated (used by the cosine baseline)."""
        return np.concatenate([p.data.reshape(-1) for _, p in sorted(self.params.items())])


class Encoder(ConvNet):
    """Shared feature extractor: H x W x 3 -> F x H/4 x W/4."""

    def __init__(self, rng, in_channels=3, name="encoder"):
        super().__init__(name)
        prev = in_channels
        for idx, out_ch in enumerate(ENCODER_CHANNELS):
            self._add_conv(rng, idx, out_ch, prev, 3)
            prev = out_ch

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ad.AutodiffError(
                f"encoder input spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by 4")
        h = x
        for idx, stride in enumerate(ENCODER_STRIDES):
            h = ad.conv2d(h, self.params[f"conv{idx}.w"], stride=stride, padding=1)
            h = ad.add(h, self.params[f"conv{idx}.b"])
            h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h

    __call__ = forward


class Classifier(ConvNet):
    """Head k: features -> per-pixel class probabilities at input resolution."""

    def __init__(self, rng, num_classes, name):
        super().__init__(name)
        self.num_classes = num_classes
        self._add_conv(rng, 0, FEATURE_CHANNELS, FEATURE_CHANNELS, 3)
        self._add_conv(rng, 1, FEATURE_CHANNELS, FEATURE_CHANNELS, 3)
        self._add_conv(rng, 2, num_classes, FEATURE_CHANNELS, 1)

    def forward(self, features):
        h = features
        for idx in (0, 1):
            h = ad.conv2d(h, self.params[f"conv{idx}.w"], stride=1, padding=1)
            h = ad.add(h, self.params[f"conv{idx}.b"])
            h = ad.leaky_relu(h, LEAKY_SLOPE)
        logits = ad.conv2d(h, self.params["conv2.w"], stride=1, padding=0)
        logits = ad.add(logits, self.params["conv2.b"])
        logits = ad.upsample_bilinear(logits, 4)
        probs = ad.softmax(logits, axis=1)
        return probs, logits

    __call__ = forward


class Discriminator(ConvNet):
    """Five stride-2 4x4 convs over encoder features -> patch logits.

    Padding is 1 per layer, bumped just enough when a spatial dim would
    otherwise shrink below the kernel, so a 16x16 feature map walks
    16 -> 8 -> 4 -> 2 -> 1 -> 1.
    """

    def __init__(self, rng, in_channels=FEATURE_CHANNELS, name="discriminator"):
        super().__init__(name)
        prev = in_channels
        for idx, out_ch in enumerate(DISCRIMINATOR_CHANNELS):
            self._add_conv(rng, idx, out_ch, prev, 4)
            prev = out_ch

    def forward(self, features):
        if features.shape[2] < MIN_DISC_INPUT or features.shape[3] < MIN_DISC_INPUT:
            raise ad.AutodiffError(
                f"discriminator input {features.shape[2]}x{features.shape[3]} too small; "
                f"needs at least {MIN_DISC_INPUT}x{MIN_DISC_INPUT} features")
        h = features
        last = len(DISCRIMINATOR_CHANNELS) - 1
        for idx in range(len(DISCRIMINATOR_CHANNELS)):
            pad = 1
            if min(h.shape[2], h.shape[3]) + 2 * pad < 4:
                pad = (4 - min(h.shape[2], h.shape[3]) + 1) // 2
            h = ad.conv2d(h, self.params[f"conv{idx}.w"], stride=2, padding=pad)
            h = ad.add(h, self.params[f"conv{idx}.b"])
            if idx != last:
                h = ad.leaky_relu(h, LEAKY_SLOPE)
        return h

    __call__ = forward


@dataclass
class Nets:
    """All trainable components of one run."""
    encoder: Encoder
    classifiers: tuple
    discriminator: Discriminator
    num_classes: int

    def encoder_forward(self, x):
        return self.encoder(x)

    def classifier_forward(self, k, features):
        """k in 1..3."""
        return self.classifiers[k - 1](features)

    def discriminator_forward(self, features):
        return self.discriminator(features)

    def network_params(self):
        """Encoder + classifier parameters (everything the poly-lr SGD updates)."""
        out = dict(self.encoder.named_params())
        for c in self.classifiers:
            out.update(c.named_params())
        return out

    def discriminator_params(self):
        return self.discriminator.named_params()

    def all_params(self):
        out = self.network_params()
        out.update(self.discriminator_params())
        return out


def init_params(seed, num_classes, in_channels=3, num_classifiers=3):
    """He fan-in init, zero biases; each component gets its own child seed."""
    children = np.random.SeedSequence(seed).spawn(2 + num_classifiers)
    rngs = [np.random.Generator(np.random.PCG64(c)) for c in children]
    encoder = Encoder(rngs[0], in_channels=in_channels)
    classifiers = tuple(
        Classifier(rngs[1 + i], num_classes, name=f"classifier{i + 1}")
        for i in range(num_classifiers))
    discriminator = Discriminator(rngs[1 + num_classifiers])
    return Nets(encoder=encoder, classifiers=classifiers,
                discriminator=discriminator, num_classes=num_classes)


def nchw(images_hwc):
    """(B,H,W,3) float image stack -> contiguous (B,3,H,W) float32."""
    return np.ascontiguousarray(np.transpose(images_hwc, (0, 3, 1, 2)).astype(np.float32))


def predict_head_maps(net, images_hwc, batch_size=16, kind="probs", heads=None):
    """Per-head (N,H,W,K) maps over an image stack, without gradients.

    `heads` restricts computation to a subset of classifier indices; the
    returned list still has one slot per classifier (None where skipped).
    """
    indices = range(len(net.classifiers)) if heads is None else heads
    outs = [[] if i in indices else None for i in range(len(net.classifiers))]
    with ad.no_grad():
        for start in range(0, images_hwc.shape[0], batch_size):
            chunk = ad.Tensor(nchw(images_hwc[start:start + batch_size]))
            feats = net.encoder(chunk)
            for i in indices:
                probs, logits = net.classifiers[i](feats)
                picked = probs if kind == "probs" else logits
                outs[i].append(np.transpose(picked.data, (0, 2, 3, 1)))
    return [np.concatenate(o) if o is not None else None for o in outs]
