"""Procedural garment images and styled outline sketches, plus augmentations.

Each designer is a :class:`StyleProfile`; a dataset is a list of
:class:`StylePair` objects sharing one resolution. Pixel values are in
``[0, 1]``: images have a white background and a flat garment colour,
sketches have ink = 1 on a 0 background.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

GARMENT_CLASSES = ("top", "skirt", "vest", "trouser", "dress")
AUGMENT_OPS = ("crop", "hflip", "rotate", "scale", "line_erase", "line_thicken")
GEOMETRIC_OPS = frozenset({"crop", "hflip", "rotate", "scale"})

# Closed outlines in unit coordinates (x right, y down), kept inside [0.15, 0.85].
TEMPLATES: dict[str, np.ndarray] = {
    "top": np.array(
        [
            (0.42, 0.20), (0.30, 0.23), (0.17, 0.40), (0.25, 0.46), (0.32, 0.37),
            (0.33, 0.80), (0.67, 0.80), (0.68, 0.37), (0.75, 0.46), (0.83, 0.40),
            (0.70, 0.23), (0.58, 0.20), (0.50, 0.28),
        ]
    ),
    "skirt": np.array([(0.37, 0.22), (0.63, 0.22), (0.66, 0.40), (0.76, 0.80), (0.24, 0.80), (0.34, 0.40)]),
    "vest": np.array(
        [
            (0.41, 0.18), (0.33, 0.21), (0.34, 0.38), (0.30, 0.44), (0.31, 0.80),
            (0.69, 0.80), (0.70, 0.44), (0.66, 0.38), (0.67, 0.21), (0.59, 0.18), (0.50, 0.40),
        ]
    ),
    "trouser": np.array(
        [(0.34, 0.17), (0.66, 0.17), (0.69, 0.83), (0.54, 0.83), (0.50, 0.42), (0.46, 0.83), (0.31, 0.83)]
    ),
    "dress": np.array(
        [
            (0.42, 0.16), (0.36, 0.19), (0.38, 0.40), (0.33, 0.52), (0.24, 0.84),
            (0.76, 0.84), (0.67, 0.52), (0.62, 0.40), (0.64, 0.19), (0.58, 0.16), (0.50, 0.24),
        ]
    ),
}

# Flat colours on an 8-bit grid so PPM round-trips are exact.
COLORS = {
    "top": (200, 40, 40),
    "skirt": (40, 70, 190),
    "vest": (30, 140, 60),
    "trouser": (90, 60, 30),
    "dress": (150, 50, 160),
}

DASH_LENGTH_PX = 4.0
SEGMENT_CELL_PX = 8


@dataclass(frozen=True)
class StyleProfile:
    stroke_width_px: float = 1.0
    jitter_amplitude_px: float = 0.0
    corner_rounding: float = 0.0
    dash_probability: float = 0.0
    detail_density: float = 0.0
    seed: int = 0
    name: str = "designer"

    def __post_init__(self):
        if self.stroke_width_px <= 0:
            raise ValueError("stroke_width_px must be > 0")
        if self.jitter_amplitude_px < 0:
            raise ValueError("jitter_amplitude_px must be >= 0")
        for attr in ("corner_rounding", "dash_probability", "detail_density"):
            v = getattr(self, attr)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{attr} must lie in [0, 1], got {v}")


@dataclass
class StylePair:
    image: np.ndarray  # (3, H, W)
    sketch: np.ndarray  # (1, H, W)
    garment_class: str
    style_id: str
    outline: np.ndarray | None = field(default=None, repr=False)  # pixel coordinates


@dataclass
class SketchDataset:
    pairs: list[StylePair]
    resolution: int
    style_id: str

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.pairs])

    @property
    def sketches(self) -> np.ndarray:
        return np.stack([p.sketch for p in self.pairs])

    @property
    def classes(self) -> list[str]:
        return [p.garment_class for p in self.pairs]


# --- rasterisation --------------------------------------------------------------


def fill_polygon(points: np.ndarray, resolution: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centres. ``points`` in pixel units."""
    mask = np.zeros((resolution, resolution), dtype=bool)
    x0, y0 = points[:, 0], points[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    centers = np.arange(resolution) + 0.5
    for row, yc in enumerate(centers):
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        t = (yc - y0[crosses]) / (y1[crosses] - y0[crosses])
        xs = np.sort(x0[crosses] + t * (x1[crosses] - x0[crosses]))
        for a, b in zip(xs[0::2], xs[1::2]):
            mask[row] |= (centers >= a) & (centers < b)
    return mask


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image edge counts as outside)."""
    padded = np.pad(mask, 1)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~inner


def disk_footprint(stroke_width: float) -> np.ndarray:
    """Disk of radius ``(stroke_width - 1) / 2`` used to widen 1-px strokes."""
    r = max(stroke_width - 1.0, 0.0) / 2.0
    k = int(np.floor(r))
    yy, xx = np.mgrid[-k : k + 1, -k : k + 1]
    return (yy**2 + xx**2) <= r * r + 1e-9


def dilate(mask: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mask)
    k = footprint.shape[0] // 2
    h, w = mask.shape
    padded = np.pad(mask, k)
    for dy, dx in zip(*np.nonzero(footprint)):
        out |= padded[dy : dy + h, dx : dx + w]
    return out


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _chaikin(points: np.ndarray, q: float, iterations: int = 2) -> np.ndarray:
    for _ in range(iterations):
        nxt = np.roll(points, -1, axis=0)
        a = (1 - q) * points + q * nxt
        b = q * points + (1 - q) * nxt
        points = np.stack([a, b], axis=1).reshape(-1, 2)
    return points


def _resample(points: np.ndarray, step: float) -> np.ndarray:
    closed = np.vstack([points, points[:1]])
    seg = np.diff(closed, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    n = max(int(cum[-1] / step), len(points))
    s = np.linspace(0.0, cum[-1], n, endpoint=False)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    t = (s - cum[idx]) / np.where(lengths[idx] > 0, lengths[idx], 1.0)
    return closed[idx] + t[:, None] * seg[idx]


# --- generation -------------------------------------------------------------------


def garment_outline(garment_class: str, rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Seeded perturbation of a template, returned in pixel coordinates."""
    pts = TEMPLATES[garment_class].copy()
    scale = rng.uniform(0.92, 1.04)
    shift = rng.uniform(-0.02, 0.02, size=2)
    pts = (pts - 0.5) * scale + 0.5 + shift
    pts = pts + rng.uniform(-0.012, 0.012, size=pts.shape)
    return pts * resolution


def render_image(outline: np.ndarray, garment_class: str, resolution: int) -> np.ndarray:
    mask = fill_polygon(outline, resolution)
    img = np.ones((3, resolution, resolution))
    color = np.array(COLORS[garment_class], dtype=np.float64) / 255.0
    img[:, mask] = color[:, None]
    return img


def render_sketch(outline: np.ndarray, profile: StyleProfile, rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Outline drawing of ``outline`` under the profile's stroke style."""
    pts = outline
    if profile.corner_rounding > 0:
        pts = _chaikin(pts, 0.25 * profile.corner_rounding)
    dense = None
    if profile.jitter_amplitude_px > 0 or profile.dash_probability > 0:
        dense = _resample(pts, 1.0)
    if profile.jitter_amplitude_px > 0:
        noise = rng.normal(0.0, profile.jitter_amplitude_px, size=dense.shape)
        noise = (noise + np.roll(noise, 1, axis=0) + np.roll(noise, -1, axis=0)) / 3.0
        dense = dense + noise
        pts = dense
    mask = fill_polygon(pts, resolution)
    edge = boundary(mask)
    if profile.dash_probability > 0:
        ys, xs = np.nonzero(edge)
        centers = np.stack([xs + 0.5, ys + 0.5], axis=1)
        d2 = ((centers[:, None, :] - dense[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        n_dash = int(np.ceil(len(dense) / DASH_LENGTH_PX))
        gaps = rng.random(n_dash) < profile.dash_probability
        drop = gaps[(nearest / DASH_LENGTH_PX).astype(int)]
        edge[ys[drop], xs[drop]] = False
    ink = dilate(edge, disk_footprint(profile.stroke_width_px))
    n_detail = int(round(profile.detail_density * 6))
    if n_detail:
        inside = np.argwhere(mask & ~boundary(mask))
        if len(inside) >= 2:
            for _ in range(n_detail):
                (ya, xa), (yb, xb) = inside[rng.choice(len(inside), size=2, replace=False)]
                for x, y in bresenham(int(xa), int(ya), int(xb), int(yb)):
                    if mask[y, x]:
                        ink[y, x] = True
    return ink.astype(np.float64)[None]


def generate_dataset(profile: StyleProfile, n_pairs: int, resolution: int = 32) -> SketchDataset:
    """Deterministic image/sketch pairs for one designer style."""
    if resolution <= 0 or resolution % 8:
        raise ValueError(f"resolution must be a positive multiple of 8, got {resolution}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    root = np.random.SeedSequence(profile.seed)
    pairs = []
    for i, child in enumerate(root.spawn(n_pairs)):
        rng = np.random.default_rng(child)
        cls = GARMENT_CLASSES[int(rng.integers(len(GARMENT_CLASSES)))]
        outline = garment_outline(cls, rng, resolution)
        image = render_image(outline, cls, resolution)
        sketch = render_sketch(outline, profile, rng, resolution)
        pairs.append(StylePair(image, sketch, cls, profile.name, outline))
    return SketchDataset(pairs, resolution, profile.name)


# --- augmentation ---------------------------------------------------------------


def _affine(arr: np.ndarray, matrix: np.ndarray, cval: float) -> np.ndarray:
    """Apply an output->input affine map about the image centre to every channel."""
    h, w = arr.shape[1:]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return np.stack(
        [ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=cval) for ch in arr]
    )


def _crop_resize(arr: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Bilinear resize of the ``size`` x ``size`` window at (top, left) back to the full frame.

    Nearest-neighbour resampling would duplicate whole rows and columns, which
    doubles the weight of any 1-px stroke that lands on them.
    """
    h = arr.shape[1]
    ratio = size / h
    offset = np.array([top, left]) + 0.5 * ratio - 0.5
    return np.stack(
        [ndimage.affine_transform(ch, np.eye(2) * ratio, offset=offset, order=1, mode="nearest") for ch in arr]
    )


def _stroke_segments(ink: np.ndarray) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(ink, structure=np.ones((3, 3)))
    h, w = ink.shape
    cells = (np.arange(h)[:, None] // SEGMENT_CELL_PX) * ((w + SEGMENT_CELL_PX - 1) // SEGMENT_CELL_PX) + (
        np.arange(w)[None, :] // SEGMENT_CELL_PX
    )
    key = np.where(labels > 0, labels * 10_000 + cells, 0)
    uniq, inv = np.unique(key, return_inverse=True)
    return inv.reshape(h, w), len(uniq)


def augment(pair: StylePair, ops: Iterable[str], seed: int) -> StylePair:
    """Apply the requested augmentations in canonical order.

    Geometric ops transform image and sketch identically; line ops touch the
    sketch only.
    """
    ops = set(ops)
    unknown = ops - set(AUGMENT_OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    image, sketch = pair.image.copy(), pair.sketch.copy()
    h = image.shape[1]
    if "crop" in ops:
        size = int(np.ceil(h * rng.uniform(np.sqrt(0.75), 1.0)))
        size = min(size, h)
        top, left = rng.integers(0, h - size + 1, size=2)
        image, sketch = _crop_resize(image, top, left, size), _crop_resize(sketch, top, left, size)
    if "hflip" in ops:
        image, sketch = image[:, :, ::-1].copy(), sketch[:, :, ::-1].copy()
    if "rotate" in ops:
        theta = np.deg2rad(rng.uniform(-15.0, 15.0))
        c, s = np.cos(theta), np.sin(theta)
        m = np.array([[c, -s], [s, c]])
        image, sketch = _affine(image, m, 1.0), _affine(sketch, m, 0.0)
    if "scale" in ops:
        z = rng.uniform(0.9, 1.1)
        m = np.eye(2) / z
        image, sketch = _affine(image, m, 1.0), _affine(sketch, m, 0.0)
    if "line_erase" in ops:
        ink = sketch[0] > 0.5
        seg, n = _stroke_segments(ink)
        drop = rng.random(n) < 0.1
        drop[0] = False  # background
        sketch = sketch.copy()
        sketch[0][drop[seg] & ink] = 0.0
    if "line_thicken" in ops:
        if rng.random() < 0.5:
            cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
            sketch = ndimage.grey_dilation(sketch, footprint=cross[None])
    return StylePair(image, sketch, pair.garment_class, pair.style_id, pair.outline)


def ink_centroid(arr: np.ndarray, background: float) -> np.ndarray:
    """(row, col) centroid weighted by distance from the background value."""
    weight = np.abs(arr - background).mean(axis=0)
    total = weight.sum()
    if total <= 0:
        return np.array([np.nan, np.nan])
    rows, cols = np.mgrid[: weight.shape[0], : weight.shape[1]]
    return np.array([(weight * rows).sum() / total, (weight * cols).sum() / total])


# --- file I/O ----------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[1:]
    data = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, sketch: np.ndarray) -> None:
    h, w = sketch.shape[-2:]
    data = np.clip(np.rint(sketch.reshape(h, w) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, found {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def save_dataset(dataset: SketchDataset, directory: str | os.PathLike) -> Path:
    """Write PPM/PGM files plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, pair in enumerate(dataset.pairs):
        img_name, sk_name = f"{i:04d}_image.ppm", f"{i:04d}_sketch.pgm"
        write_ppm(directory / img_name, pair.image)
        write_pgm(directory / sk_name, pair.sketch)
        manifest.append(
            {"image": img_name, "sketch": sk_name, "garment_class": pair.garment_class, "style_id": pair.style_id}
        )
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(directory: str | os.PathLike) -> SketchDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if not manifest:
        raise ValueError(f"{directory}: empty manifest")
    pairs = [
        StylePair(read_ppm(directory / m["image"]), read_pgm(directory / m["sketch"]), m["garment_class"], m["style_id"])
        for m in manifest
    ]
    return SketchDataset(pairs, pairs[0].image.shape[1], pairs[0].style_id)


def profile_to_dict(profile: StyleProfile) -> dict:
    return asdict(profile)
