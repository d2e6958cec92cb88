"""Synthetic segmentation benchmark and Cityscapes-style directory I/O.

Three appearance domains (source, target, wild) are rendered from one
procedural scene distribution: the scene layout (and therefore the label map)
only depends on the scene seed, while a DomainStyle controls colors, gamma,
blur, noise and brightness jitter. Source-train carries labels; target-train
never does; target-val and wild-val keep labels for evaluation only.

On disk every split uses the same layout the ingestion path reads:
`<root>/<split>/images/*.png`, `<root>/<split>/labels/*.png` plus a top-level
`index.json`. Images are 8-bit RGB PNG, labels single-channel 8-bit PNG with
255 as the ignore id, so generated data round-trips losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_ID = 255

ROLES = ("source-train", "target-train", "target-val", "wild-val")
_ROLE_CODE = {r: i for i, r in enumerate(ROLES)}

DEFAULT_COUNTS = {
    "source-train": 300,
    "target-train": 300,
    "target-val": 100,
    "wild-val": 100,
}


@dataclass
class SceneSpec:
    """Procedural scene distribution: seed plus layout parameters."""
    seed: int = 0
    num_classes: int = 5
    height: int = 64
    width: int = 64
    min_regions: int = 4
    max_regions: int = 7
    min_size: int = 10
    max_size: int = 28

    def to_dict(self):
        return asdict(self)


@dataclass
class DomainStyle:
    """Appearance parameters for rendering one domain."""
    name: str
    class_colors: list          # num_classes triples of floats in [0,1]
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: int = 0
    brightness: float = 0.0
    contrast: float = 1.0

    def to_dict(self):
        return {
            "name": self.name,
            "class_colors": [list(map(float, c)) for c in self.class_colors],
            "gamma": self.gamma,
            "noise_sigma": self.noise_sigma,
            "blur_radius": self.blur_radius,
            "brightness": self.brightness,
            "contrast": self.contrast,
        }


class DomainSample:
    """One image with an optional label map; loads lazily when file-backed."""

    def __init__(self, sample_id, image=None, labels=None,
                 image_path=None, labels_path=None, num_classes=None, crop=None):
        self.sample_id = sample_id
        self._image = image
        self._labels = labels
        self._image_path = image_path
        self._labels_path = labels_path
        self._num_classes = num_classes
        self._crop = crop

    @property
    def image(self):
        if self._image is None and self._image_path is not None:
            img = _read_image(self._image_path)
            self._image = _apply_crop(img, self._crop)
        return self._image

    @property
    def labels(self):
        if self._labels is None and self._labels_path is not None:
            lab = _read_labels(self._labels_path, self._num_classes)
            self._labels = _apply_crop(lab, self._crop)
        return self._labels

    @property
    def has_labels(self):
        return self._labels is not None or self._labels_path is not None


@dataclass
class DatasetSplit:
    role: str
    samples: list
    num_classes: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def images(self):
        return [s.image for s in self.samples]


# ---------------------------------------------------------------------------
# Default styles
# ---------------------------------------------------------------------------
# Class palettes are chosen so the target domain is a genuine shift: globally
# darker and noisier, with class 1 and 3 colors drawn toward each other so a
# global per-channel color map cannot fully undo the gap. The wild domain
# pushes gamma and brightness further still.

def default_styles():
    # The target palette is a per-class color rotation that roughly preserves
    # the global mean, so a global color map can only partially bridge the
    # gap; gamma/noise/blur add a mild affine-matchable component on top.
    source = DomainStyle(
        name="source",
        class_colors=[
            (0.30, 0.32, 0.34),   # 0 background
            (0.75, 0.20, 0.18),   # 1
            (0.18, 0.62, 0.22),   # 2
            (0.88, 0.62, 0.12),   # 3
            (0.22, 0.35, 0.80),   # 4
        ],
        gamma=1.0,
        noise_sigma=0.03,
        blur_radius=0,
        brightness=0.0,
        contrast=1.0,
    )
    # classes 0-2 drift warm/dark, classes 3-4 drift the opposite way, so the
    # fitted global map helps some classes and overshoots on others; each
    # classifier ends up ahead on a different class subset
    target = DomainStyle(
        name="target",
        class_colors=[
            (0.40, 0.36, 0.30),
            (0.83, 0.30, 0.14),
            (0.28, 0.68, 0.18),
            (0.76, 0.52, 0.24),
            (0.12, 0.27, 0.68),
        ],
        gamma=1.1,
        noise_sigma=0.05,
        blur_radius=1,
        brightness=-0.02,
        contrast=0.95,
    )
    wild = DomainStyle(
        name="wild",
        class_colors=[
            (0.42, 0.38, 0.29),
            (0.60, 0.33, 0.23),
            (0.28, 0.50, 0.35),
            (0.70, 0.48, 0.24),
            (0.38, 0.42, 0.60),
        ],
        gamma=1.8,
        noise_sigma=0.07,
        blur_radius=1,
        brightness=0.06,
        contrast=0.85,
    )
    return {"source": source, "target": target, "wild": wild}


# ---------------------------------------------------------------------------
# Scene + rendering
# ---------------------------------------------------------------------------

def _scene_rng(spec, role, index):
    seq = np.random.SeedSequence([int(spec.seed), _ROLE_CODE[role], int(index)])
    return np.random.Generator(np.random.PCG64(seq))


def generate_labels(spec, rng):
    """Draw one scene layout: class-0 canvas plus stacked random regions.

    The first num_classes-1 regions get the foreground classes in a shuffled
    order, so every scene contains every class; extra regions draw uniformly.
    """
    h, w, k = spec.height, spec.width, spec.num_classes
    labels = np.zeros((h, w), dtype=np.uint8)
    n_regions = int(rng.integers(spec.min_regions, spec.max_regions + 1))
    classes = list(rng.permutation(np.arange(1, k)))
    while len(classes) < n_regions:
        classes.append(int(rng.integers(1, k)))
    yy, xx = np.mgrid[0:h, 0:w]
    for cls in classes[:n_regions]:
        cy = float(rng.uniform(0, h))
        cx = float(rng.uniform(0, w))
        sy = float(rng.uniform(spec.min_size, spec.max_size)) / 2.0
        sx = float(rng.uniform(spec.min_size, spec.max_size)) / 2.0
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= sy) & (np.abs(xx - cx) <= sx)
        else:
            mask = ((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2 <= 1.0
        labels[mask] = cls
    return labels


def _box_blur(img, radius):
    if radius <= 0:
        return img
    size = 2 * radius + 1
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for o in range(size):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(o, o + out.shape[axis])
            acc += padded[tuple(sl)]
        out = acc / size
    return out


def render_image(labels, style, rng):
    """Render a label map under a domain style; quantized to the 8-bit grid."""
    palette = np.asarray(style.class_colors, dtype=np.float64)
    img = palette[labels]
    img = (img - 0.5) * style.contrast + 0.5 + style.brightness
    img = np.clip(img, 0.0, 1.0) ** style.gamma
    img = _box_blur(img, style.blur_radius)
    if style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


_ROLE_STYLE = {
    "source-train": "source",
    "target-train": "target",
    "target-val": "target",
    "wild-val": "wild",
}


def generate_benchmark(spec, styles=None, counts=None):
    """Build all four splits; reproducible to the bit from spec.seed."""
    styles = styles or default_styles()
    counts = dict(DEFAULT_COUNTS, **(counts or {}))
    for role, n in counts.items():
        if n < 1:
            raise ValueError(f"counts[{role!r}] must be >= 1, got {n}")
    rendered = [json.dumps({k: v for k, v in s.to_dict().items() if k != "name"},
                           sort_keys=True) for s in styles.values()]
    if len(set(rendered)) != len(rendered):
        raise ValueError("styles must be pairwise distinct")

    splits = {}
    for role in ROLES:
        style = styles[_ROLE_STYLE[role]]
        samples = []
        for idx in range(counts[role]):
            rng = _scene_rng(spec, role, idx)
            labels = generate_labels(spec, rng)
            image = render_image(labels, style, rng)
            keep = labels if role != "target-train" else None
            samples.append(DomainSample(f"{role}_{idx:05d}", image=image, labels=keep))
        splits[role] = DatasetSplit(role=role, samples=samples, num_classes=spec.num_classes)
    return splits


# ---------------------------------------------------------------------------
# PNG round-trip
# ---------------------------------------------------------------------------

def _read_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _read_labels(path, num_classes):
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if num_classes is not None:
        bad = np.unique(arr[(arr >= num_classes) & (arr != IGNORE_ID)])
        if bad.size:
            raise ValueError(f"unknown class ids {bad.tolist()} in {path} "
                             f"(expected [0, {num_classes}) or {IGNORE_ID})")
    return arr


def _apply_crop(arr, crop):
    if crop is None:
        return arr
    ch, cw = crop
    return arr[:ch, :cw]


def _write_image(path, image):
    Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(path)


def _write_labels(path, labels):
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def save_split(split, root_path):
    """Write one split under `<root>/<split>/{images,labels}` and update index.json."""
    root = Path(root_path)
    img_dir = root / split.role / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir = root / split.role / "labels"
    entries = []
    for s in split.samples:
        _write_image(img_dir / f"{s.sample_id}.png", s.image)
        if s.has_labels:
            lab_dir.mkdir(parents=True, exist_ok=True)
            _write_labels(lab_dir / f"{s.sample_id}.png", s.labels)
        entries.append(s.sample_id)

    index_path = root / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {"splits": {}}
    index["splits"][split.role] = {
        "role": split.role,
        "num_classes": split.num_classes,
        "sample_ids": entries,
        "labeled": any(s.has_labels for s in split.samples),
    }
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True))


def save_benchmark(splits, root_path):
    for split in splits.values():
        save_split(split, root_path)


def load_split(root_path, role):
    """Load a split written by save_split (lazy; labels only if present)."""
    root = Path(root_path)
    index = json.loads((root / "index.json").read_text())
    if role not in index["splits"]:
        raise ValueError(f"split {role!r} not present in {root / 'index.json'}")
    entry = index["splits"][role]
    num_classes = entry["num_classes"]
    samples = []
    for sid in entry["sample_ids"]:
        img = root / role / "images" / f"{sid}.png"
        lab = root / role / "labels" / f"{sid}.png"
        samples.append(DomainSample(
            sid,
            image_path=img,
            labels_path=lab if entry["labeled"] and lab.exists() else None,
            num_classes=num_classes,
        ))
    return DatasetSplit(role=role, samples=samples, num_classes=num_classes)


def load_benchmark(root_path):
    root = Path(root_path)
    index = json.loads((root / "index.json").read_text())
    return {role: load_split(root, role) for role in index["splits"]}


# ---------------------------------------------------------------------------
# Cityscapes-style ingestion
# ---------------------------------------------------------------------------

def load_cityscapes_layout(root_path, split, num_classes=19, crop=None, labeled=True):
    """Read a standard leftImg8bit/gtFine tree read-only, as a lazy split.

    Expects `<root>/leftImg8bit/<split>/**/*_leftImg8bit.png` with matching
    `<root>/gtFine/<split>/**/*_gtFine_labelTrainIds.png`. Labels must use the
    train-id encoding with 255 as ignore. An empty tree yields an empty split.
    """
    root = Path(root_path)
    img_root = root / "leftImg8bit" / split
    samples = []
    if img_root.is_dir():
        for img_path in sorted(img_root.rglob("*_leftImg8bit.png")):
            rel = img_path.relative_to(img_root)
            lab_name = img_path.name.replace("_leftImg8bit.png", "_gtFine_labelTrainIds.png")
            lab_path = root / "gtFine" / split / rel.parent / lab_name
            if labeled and not lab_path.exists():
                raise FileNotFoundError(
                    f"missing label file for {img_path}: expected {lab_path}")
            samples.append(DomainSample(
                img_path.stem.replace("_leftImg8bit", ""),
                image_path=img_path,
                labels_path=lab_path if labeled else None,
                num_classes=num_classes,
                crop=crop,
            ))
    role = "source-train" if labeled else "target-train"
    return DatasetSplit(role=role, samples=samples, num_classes=num_classes)


# ---------------------------------------------------------------------------
# Batch iteration
# ---------------------------------------------------------------------------

def epoch_permutation(n, seed, epoch):
    """Deterministic per-epoch shuffle; shared by iterate_batches and the trainer."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(epoch)])
    return np.random.Generator(np.random.PCG64(seq)).permutation(n)


def iterate_batches(split, batch_size, seed, epoch=0):
    """Yield one epoch of shuffled batches; the final partial batch is emitted."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_permutation(len(split.samples), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield [split.samples[i] for i in idx]


def batch_at(split, batch_size, seed, iteration):
    """Samples of the `iteration`-th training batch under epoch-level shuffling.

    Pure function of its arguments, so a resumed run regenerates the exact
    same batch sequence from the iteration counter alone.
    """
    n = len(split.samples)
    per_epoch = (n + batch_size - 1) // batch_size
    epoch, slot = divmod(int(iteration), per_epoch)
    order = epoch_permutation(n, seed, epoch)
    idx = order[slot * batch_size:(slot + 1) * batch_size]
    return [split.samples[i] for i in idx]


def stack_images(samples):
    """(B,H,W,3) float32 stack of sample images."""
    return np.stack([s.image for s in samples]).astype(np.float32)


def stack_labels(samples):
    return np.stack([s.labels for s in samples])
