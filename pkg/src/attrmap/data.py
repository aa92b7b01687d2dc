"""Samples, CSV manifests and procedural attribute datasets.

Attribute labels live in [-1, 1] and the overall score in [0, 1]. Synthetic
generators draw one latent parameter per image (saturation, object contrast,
blur radius or light strength) and map it linearly onto the attribute's label,
so the ground truth of every image is known exactly.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import ConfigError
from .names import ATTRIBUTES
from .ppm import read_ppm, write_ppm
from .tensor import seeded_rng


class ManifestError(ValueError):
    pass


OVERALL = ATTRIBUTES.index("overall")
SYNTH_KINDS = ("vivid_color", "object_emphasis", "depth_of_field", "light")
MAX_BLUR_RADIUS = 4


@dataclass
class Sample:
    image: np.ndarray                 # 3 x H x H in [0, 1]
    labels: np.ndarray                # one value per output, manifest order
    meta: dict = field(default_factory=dict)


def check_labels(labels, names=ATTRIBUTES) -> None:
    for name, v in zip(names, labels):
        lo = 0.0 if name == "overall" else -1.0
        if not np.isfinite(v) or not lo <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [{lo:g}, 1]")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    names: tuple = ATTRIBUTES
    rows: list = field(default_factory=list)   # (path, tuple of floats)

    def __len__(self):
        return len(self.rows)


def parse_manifest(text: str, names=ATTRIBUTES) -> Manifest:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    expected = ["path", *names]
    if header is None:
        raise ManifestError("row 1: missing header")
    if header != expected:
        missing = [c for c in expected if c not in header]
        detail = f"missing column(s) {', '.join(missing)}" if missing else "columns out of order"
        raise ManifestError(f"row 1: bad header ({detail}); expected {','.join(expected)}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise ManifestError(f"row {lineno}: expected {len(expected)} fields, got {len(row)}")
        try:
            values = tuple(float(v) for v in row[1:])
        except ValueError as exc:
            raise ManifestError(f"row {lineno}: non-numeric label ({exc})") from None
        try:
            check_labels(values, names)
        except ValueError as exc:
            raise ManifestError(f"row {lineno}: {exc}") from None
        rows.append((row[0], values))
    return Manifest(tuple(names), rows)


def load_manifest(path, names=ATTRIBUTES) -> Manifest:
    with open(path, newline="") as fh:
        return parse_manifest(fh.read(), names)


def format_manifest(manifest: Manifest) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["path", *manifest.names])
    for path, values in manifest.rows:
        writer.writerow([path, *(repr(float(v)) for v in values)])
    return out.getvalue()


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_manifest(manifest))


def normalize_raw_scores(mean_ratings) -> np.ndarray:
    """Rater means -> labels: overall 1..5 becomes 0..1, attributes pass through."""
    r = np.asarray(mean_ratings, dtype=np.float64)
    if r.shape != (len(ATTRIBUTES),):
        raise ValueError(f"expected {len(ATTRIBUTES)} ratings, got shape {r.shape}")
    if not 1.0 <= r[OVERALL] <= 5.0:
        raise ValueError(f"overall rating {r[OVERALL]} outside [1, 5]")
    attrs = np.delete(r, OVERALL)
    if not ((attrs >= -1) & (attrs <= 1)).all():
        raise ValueError("attribute ratings must lie in [-1, 1]")
    out = r.copy()
    out[OVERALL] = (r[OVERALL] - 1.0) / 4.0
    return out


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    kind: str
    count: int
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; choose from {', '.join(SYNTH_KINDS)}")
        if self.count < 0 or self.image_size < 8:
            raise ConfigError("count must be >= 0 and image_size >= 8")


def hsv_to_rgb(h, s, v):
    """Vectorised HSV -> RGB; inputs broadcast, output has a trailing axis of 3."""
    h, s, v = np.broadcast_arrays(*(np.asarray(a, np.float64) for a in (h, s, v)))
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(choices):
        m = i == k
        rgb[m] = np.stack([r[m], g[m], b[m]], axis=-1)
    return rgb


def labels_for(kind: str, value: float) -> np.ndarray:
    """Label vector for a generator latent in [0, 1]; overall is the mean of the
    four synthetic attributes rescaled to [0, 1]."""
    labels = np.zeros(len(ATTRIBUTES))
    labels[ATTRIBUTES.index(kind)] = 2.0 * value - 1.0
    four = [labels[ATTRIBUTES.index(k)] for k in SYNTH_KINDS]
    labels[OVERALL] = (np.mean(four) + 1.0) / 2.0
    return labels


def _texture(rng, size, sigma=1.5):
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / n.std()


def _ellipse(rng, size):
    a, b = rng.uniform(size / 7, size / 4, 2)
    cx, cy = rng.uniform(a + 1, size - a - 1), rng.uniform(b + 1, size - b - 1)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    ys, xs = np.nonzero(mask)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return mask, bbox


def _vivid_color(rng, size):
    s = rng.uniform()
    hue, v = rng.uniform(), rng.uniform(0.55, 0.9)
    value = np.clip(v + 0.05 * _texture(rng, size), 0, 1)
    return hsv_to_rgb(hue, s, value), s, {}


def _object_emphasis(rng, size):
    c = rng.uniform()
    gray = rng.uniform(0.35, 0.65)
    tint = rng.uniform(-0.03, 0.03, 3)
    bg = np.clip(gray + tint + 0.12 * _texture(rng, size)[..., None], 0, 1)
    mask, bbox = _ellipse(rng, size)
    vivid = hsv_to_rgb(rng.uniform(), 1.0, rng.uniform(0.75, 1.0))
    obj = (1 - c) * (gray + tint) + c * vivid
    img = np.where(mask[..., None], obj, bg)
    return img, c, {"bbox": bbox}


def _depth_of_field(rng, size):
    r = int(rng.integers(0, MAX_BLUR_RADIUS + 1))
    bg = np.clip(0.5 + 0.25 * rng.standard_normal((size, size, 3)), 0, 1)
    if r:
        bg = ndimage.uniform_filter(bg, size=(2 * r + 1, 2 * r + 1, 1), mode="reflect")
    mask, bbox = _ellipse(rng, size)
    fg = hsv_to_rgb(rng.uniform(), 0.6, np.clip(0.6 + 0.25 * rng.standard_normal((size, size)), 0, 1))
    img = np.where(mask[..., None], fg, bg)
    return img, r / MAX_BLUR_RADIUS, {"bbox": bbox}


def _light(rng, size):
    g = rng.uniform()
    cx, cy = rng.uniform(size / 4, 3 * size / 4, 2)
    radius = rng.uniform(size / 16, size / 10)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    ramp = np.clip(1.0 - np.abs(yy - cy) / (size / 2), 0, 1)
    lum = 0.25 + 0.6 * g * ramp + 0.03 * _texture(rng, size)
    disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    lum = np.where(disk, 0.97, lum)
    img = hsv_to_rgb(rng.uniform(), 0.25, np.clip(lum, 0, 1))
    r = int(radius)
    return img, g, {"bbox": (int(cx) - r, int(cy) - r, int(cx) + r + 1, int(cy) + r + 1)}


_GENERATORS = {
    "vivid_color": _vivid_color,
    "object_emphasis": _object_emphasis,
    "depth_of_field": _depth_of_field,
    "light": _light,
}


def synth_sample(kind: str, index: int, image_size: int = 64, seed: int = 0) -> Sample:
    """The ``index``-th image of a synthetic set; depends only on its arguments."""
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown kind {kind!r}; choose from {', '.join(SYNTH_KINDS)}")
    rng = seeded_rng(seed, SYNTH_KINDS.index(kind), index)
    img, latent, meta = _GENERATORS[kind](rng, image_size)
    # quantize to 8 bits so PPM round-trips are exact
    pixels = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(2, 0, 1)
    meta = dict(meta, kind=kind, index=index, latent=float(latent))
    image = (pixels / np.float32(255)).astype(np.float32)     # same arithmetic as the PPM reader
    return Sample(image, labels_for(kind, latent).astype(np.float32), meta)


def synth_generate(spec: SynthSpec) -> list[Sample]:
    return [synth_sample(spec.kind, i, spec.image_size, spec.seed) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# augmentation, splitting, files
# ---------------------------------------------------------------------------

def hflip(sample: Sample) -> Sample:
    """Mirror about the vertical axis; boxes are half-open so x -> W - x."""
    width = sample.image.shape[2]
    meta = dict(sample.meta)
    if "bbox" in meta:
        x0, y0, x1, y1 = meta["bbox"]
        meta["bbox"] = (width - x1, y0, width - x0, y1)
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]), sample.labels, meta)


def split(items, train_n: int, val_n: int, test_n: int, seed: int = 0):
    """Disjoint seeded random subsets of sizes ``train_n``, ``val_n``, ``test_n``."""
    items = list(items.rows) if isinstance(items, Manifest) else list(items)
    if min(train_n, val_n, test_n) < 0 or train_n + val_n + test_n > len(items):
        raise ConfigError(f"cannot take {train_n}+{val_n}+{test_n} from {len(items)} items")
    order = seeded_rng(seed).permutation(len(items))
    parts = np.split(order[:train_n + val_n + test_n], [train_n, train_n + val_n])
    return tuple([items[i] for i in part] for part in parts)


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.labels for s in samples]).astype(np.float32))


def write_dataset(samples, out_dir, prefix="img") -> Path:
    """Write samples as PPM files plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        name = f"{prefix}_{i:05d}.ppm"
        write_ppm(out_dir / name, s.image)
        rows.append((name, tuple(float(v) for v in s.labels)))
    path = out_dir / "manifest.csv"
    save_manifest(Manifest(ATTRIBUTES, rows), path)
    return path


def load_dataset(manifest_path) -> list[Sample]:
    """Samples of a manifest; image paths resolve relative to the manifest."""
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    samples = []
    for path, values in manifest.rows:
        full = path if os.path.isabs(path) else base / path
        samples.append(Sample(read_ppm(full), np.asarray(values, np.float32), {"path": path}))
    return samples
