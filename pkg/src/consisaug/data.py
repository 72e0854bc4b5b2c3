"""Synthetic endoscopy-like data, dataset I/O and the two augmentation stages.

Dataset directory layout::

    images/{id}.ppm      binary P6, 8-bit RGB
    labels/{id}.txt      one box per line: ``class cx cy w h`` normalized to [0, 1]
    manifest.txt         ``<sha256>  <relative path>`` per file (sha256sum format)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .boxgeom import FLIP_KINDS, FlipKind, flip_box, flip_image
from .errors import CorruptImage, IoError, LabelParseError, MissingLabel

MIN_BOX_EXTENT = 2.0


@dataclass
class LabeledSample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    boxes: np.ndarray  # G x 4, (cx, cy, w, h) in pixels
    classes: np.ndarray  # G
    id: str = ""
    dropped_boxes: int = 0

    @property
    def size(self) -> int:
        return self.image.shape[-1]


@dataclass(frozen=True)
class DomainConfig:
    base_rgb: tuple[float, float, float]
    base_std: float
    vignette: float
    specular_range: tuple[int, int]
    polyp_count_range: tuple[int, int]
    radius_range: tuple[float, float]
    eccentricity_range: tuple[float, float]
    texture_scale: int
    polyp_tint: tuple[float, float, float]
    image_size: int = 64

    def __post_init__(self):
        for name in ("specular_range", "polyp_count_range", "radius_range", "eccentricity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.radius_range[0] < 3:
            raise ValueError("polyp radii must be at least 3 px")


DOMAINS = {
    "a": DomainConfig(base_rgb=(0.80, 0.45, 0.42), base_std=0.04, vignette=0.45, specular_range=(1, 4),
                      polyp_count_range=(0, 3), radius_range=(5.0, 12.0), eccentricity_range=(0.7, 1.0),
                      texture_scale=8, polyp_tint=(0.10, -0.08, -0.06)),
    "b": DomainConfig(base_rgb=(0.72, 0.40, 0.30), base_std=0.06, vignette=0.6, specular_range=(2, 6),
                      polyp_count_range=(0, 3), radius_range=(4.0, 10.0), eccentricity_range=(0.6, 1.0),
                      texture_scale=4, polyp_tint=(0.12, -0.04, -0.08)),
}


@dataclass
class AugmentedPair:
    student: LabeledSample
    teacher_image: np.ndarray
    teacher_boxes: np.ndarray
    kind: FlipKind


# ---------------------------------------------------------------- generation

def _smooth_noise(rng: np.random.Generator, size: int, scale: int) -> np.ndarray:
    """Value noise: a coarse random grid bilinearly upsampled to ``size``."""
    cells = max(2, size // max(scale, 1) + 2)
    grid = rng.standard_normal((cells, cells))
    coords = (np.arange(size) + 0.5) / size * (cells - 1)
    i0 = np.clip(np.floor(coords).astype(int), 0, cells - 2)
    f = coords - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def render_sample(config: DomainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one image (3 x S x S floats) and its boxes (G x 4)."""
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    base = np.asarray(config.base_rgb)[:, None, None]
    texture = _smooth_noise(rng, s, config.texture_scale)
    fine = rng.standard_normal((s, s)) * 0.01
    img = base * (1.0 + config.base_std * 2.0 * texture) + fine

    n_polyps = int(rng.integers(config.polyp_count_range[0], config.polyp_count_range[1] + 1))
    boxes = []
    for _ in range(n_polyps):
        for _attempt in range(20):
            r = rng.uniform(*config.radius_range)
            ecc = rng.uniform(*config.eccentricity_range)
            rx, ry = (r, r * ecc) if rng.random() < 0.5 else (r * ecc, r)
            rx, ry = max(rx, 3.0), max(ry, 3.0)
            cx = rng.uniform(rx + 1, s - rx - 1)
            cy = rng.uniform(ry + 1, s - ry - 1)
            if all(abs(cx - b[0]) > (rx + b[2] / 2) * 0.9 or abs(cy - b[1]) > (ry + b[3] / 2) * 0.9
                   for b in boxes):
                break
        else:
            continue
        d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
        alpha = 1.0 / (1.0 + np.exp((d - 1.0) * 12.0))
        # light from the upper left gives the bump some relief
        shade = 1.0 + 0.18 * (-(xx - cx) / rx - (yy - cy) / ry) * 0.5 * (d < 1.2)
        tint = (base + np.asarray(config.polyp_tint)[:, None, None]) * shade
        img = img * (1 - alpha) + tint * alpha
        boxes.append((cx, cy, 2 * rx, 2 * ry))

    n_spec = int(rng.integers(config.specular_range[0], config.specular_range[1] + 1))
    for _ in range(n_spec):
        sx, sy = rng.uniform(0, s, 2)
        sr = rng.uniform(0.6, 1.6)
        spot = np.exp(-(((xx - sx) ** 2 + (yy - sy) ** 2) / (2 * sr * sr)))
        img = img + 0.6 * spot

    rad = np.sqrt((xx - s / 2) ** 2 + (yy - s / 2) ** 2) / (s / np.sqrt(2))
    img = img * (1.0 - config.vignette * rad ** 2)
    boxes_arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.clip(img, 0.0, 1.0), boxes_arr


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_synthetic(config: DomainConfig, n: int, seed: int, out_dir) -> list[tuple[str, str]]:
    """Write ``n`` samples plus manifest; returns ``[(sha256, relpath), ...]``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
        entries = []
        for idx in range(n):
            image, boxes = render_sample(config, _sample_rng(seed, idx))
            sid = f"{idx:05d}"
            write_ppm(out / "images" / f"{sid}.ppm", image)
            write_labels(out / "labels" / f"{sid}.txt", boxes, np.zeros(len(boxes), dtype=int), config.image_size)
            for rel in (f"images/{sid}.ppm", f"labels/{sid}.txt"):
                entries.append((sha256_file(out / rel), rel))
        write_manifest(out / "manifest.txt", entries)
    except OSError as exc:
        raise IoError(f"cannot write dataset to {out}: {exc}") from exc
    return entries


def write_manifest(path: Path, entries) -> None:
    Path(path).write_text("".join(f"{h}  {rel}\n" for h, rel in entries))


# ----------------------------------------------------------------------- I/O

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is 3 x H x W floats in [0, 1]."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError("PPM images need 3 channels")
    pixels = to_uint8(image).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptImage(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        if tokens[0] != b"P6":
            raise ValueError("not a binary PPM")
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptImage(f"{path}: bad PPM header ({exc})") from None
    if maxval != 255 or w < 1 or h < 1:
        raise CorruptImage(f"{path}: unsupported PPM (maxval {maxval}, size {w}x{h})")
    body = raw[pos:]
    if len(body) != w * h * 3:
        raise CorruptImage(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def write_labels(path, boxes: np.ndarray, classes, image_size: int) -> None:
    lines = []
    for c, (cx, cy, w, h) in zip(classes, np.asarray(boxes).reshape(-1, 4)):
        vals = np.array([cx, cy, w, h]) / image_size
        lines.append(f"{int(c)} " + " ".join(f"{v:.8f}" for v in vals) + "\n")
    Path(path).write_text("".join(lines))


def read_labels(path, image_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = image_size
    boxes, classes = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        try:
            if len(fields) != 5:
                raise ValueError(f"expected 5 fields, got {len(fields)}")
            cls = int(fields[0])
            cx, cy, bw, bh = (float(v) for v in fields[1:])
            if cls < 0:
                raise ValueError("negative class id")
            if not (bw > 0 and bh > 0):
                raise ValueError("box extents must be positive")
            if not all(np.isfinite([cx, cy, bw, bh])):
                raise ValueError("non-finite value")
        except ValueError as exc:
            raise LabelParseError(f"{path}:{lineno}: {exc}") from None
        boxes.append((cx * w, cy * h, bw * w, bh * h))
        classes.append(cls)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes, dtype=np.int64)


def load_dataset(directory) -> list[LabeledSample]:
    d = Path(directory)
    img_dir, lbl_dir = d / "images", d / "labels"
    images = sorted(img_dir.glob("*.ppm")) if img_dir.is_dir() else []
    labels = {p.stem for p in lbl_dir.glob("*.txt")} if lbl_dir.is_dir() else set()
    samples = []
    for img_path in images:
        sid = img_path.stem
        if sid not in labels:
            raise MissingLabel(f"no label file for image {img_path}")
        image = read_ppm(img_path)
        boxes, classes = read_labels(lbl_dir / f"{sid}.txt", image.shape[1:])
        samples.append(LabeledSample(image, boxes, classes, sid))
    orphans = labels - {p.stem for p in images}
    if orphans:
        raise CorruptImage(f"label files without images in {d}: {sorted(orphans)[:3]}")
    samples.sort(key=lambda s: s.id)
    return samples


# -------------------------------------------------------------- augmentation

def _bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous pixel-center coordinates; outside reads 0."""
    _, h, w = image.shape
    pad = np.pad(image, ((0, 0), (1, 1), (1, 1)))
    fy, fx = ys + 0.5, xs + 0.5  # index space of the padded array
    y0, x0 = np.floor(fy).astype(int), np.floor(fx).astype(int)
    ay, ax = fy - y0, fx - x0
    y0, y1 = np.clip(y0, 0, h + 1), np.clip(y0 + 1, 0, h + 1)
    x0, x1 = np.clip(x0, 0, w + 1), np.clip(x0 + 1, 0, w + 1)
    rows0, rows1 = pad[:, y0], pad[:, y1]
    top = rows0[:, :, x0] * (1 - ax) + rows0[:, :, x1] * ax
    bot = rows1[:, :, x0] * (1 - ax) + rows1[:, :, x1] * ax
    return top * (1 - ay)[:, None] + bot * ay[:, None]


def scale_jitter(sample: LabeledSample, scale: float) -> LabeledSample:
    """Zoom about the image center by ``scale`` and restore the fixed size."""
    if scale == 1.0:
        return replace(sample, image=sample.image.copy(), boxes=sample.boxes.copy())
    _, h, w = sample.image.shape
    cy, cx = h / 2, w / 2
    ys = cy + (np.arange(h) + 0.5 - cy) / scale
    xs = cx + (np.arange(w) + 0.5 - cx) / scale
    image = np.clip(_bilinear(sample.image, ys, xs), 0.0, 1.0)
    boxes = sample.boxes.copy()
    boxes[:, 0] = cx + (boxes[:, 0] - cx) * scale
    boxes[:, 1] = cy + (boxes[:, 1] - cy) * scale
    boxes[:, 2:] *= scale
    return _clip_boxes(replace(sample, image=image, boxes=boxes), (h, w))


def _clip_boxes(sample: LabeledSample, size: tuple[int, int]) -> LabeledSample:
    h, w = size
    b = sample.boxes
    x1 = np.clip(b[:, 0] - b[:, 2] / 2, 0, w)
    x2 = np.clip(b[:, 0] + b[:, 2] / 2, 0, w)
    y1 = np.clip(b[:, 1] - b[:, 3] / 2, 0, h)
    y2 = np.clip(b[:, 1] + b[:, 3] / 2, 0, h)
    keep = ((x2 - x1) >= MIN_BOX_EXTENT) & ((y2 - y1) >= MIN_BOX_EXTENT)
    boxes = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=1)[keep]
    return replace(sample, boxes=boxes, classes=sample.classes[keep],
                   dropped_boxes=sample.dropped_boxes + int((~keep).sum()))


def flip_sample(sample: LabeledSample, kind: FlipKind) -> LabeledSample:
    _, h, w = sample.image.shape
    return replace(sample, image=flip_image(sample.image, kind), boxes=flip_box(sample.boxes, kind, (h, w)))


def initial_augment(sample: LabeledSample, rng_seed, enable_flip: bool) -> LabeledSample:
    """Noise, scale jitter and (optionally) a random flip, each with probability 1/2."""
    rng = np.random.default_rng(rng_seed)
    gates = rng.random(3) < 0.5
    sigma = rng.uniform(0.0, 0.05)
    scale = rng.uniform(0.75, 1.25)
    kind = FLIP_KINDS[int(rng.integers(len(FLIP_KINDS)))]
    noise_seed = int(rng.integers(2 ** 63))
    out = sample
    if gates[0]:
        noise = np.random.default_rng(noise_seed).standard_normal(sample.image.shape) * sigma
        out = replace(out, image=np.clip(out.image + noise, 0.0, 1.0))
    if gates[1]:
        out = scale_jitter(out, scale)
    if enable_flip and gates[2]:
        out = flip_sample(out, kind)
    return out


def make_pair(sample: LabeledSample, rng_seed) -> AugmentedPair:
    rng = np.random.default_rng(rng_seed)
    kind = FLIP_KINDS[int(rng.integers(len(FLIP_KINDS)))]
    _, h, w = sample.image.shape
    return AugmentedPair(sample, flip_image(sample.image, kind), flip_box(sample.boxes, kind, (h, w)), kind)


def images_array(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def dataset_fingerprint(directory) -> str:
    """SHA-256 of the manifest, identifying a dataset by content."""
    path = Path(directory) / "manifest.txt"
    return sha256_file(path) if path.exists() else ""


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {p}: {exc}") from exc
    return p

