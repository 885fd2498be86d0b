"""Proxy FID / perceptual distance over the frozen encoder, model cost counting, reports."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .models import Discriminator, Generator, PerceptualEncoder
from .params import ParamSet

CSV_HEADER = (
    "round",
    "client_count",
    "strategy",
    "n_iter",
    "bytes_up",
    "bytes_down",
    "upload_s",
    "aggregate_s",
    "download_s",
    "mean_proxy_fid",
    "mean_lpips_proxy",
    "wall_time_total",
)


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray


def summarize(features: np.ndarray) -> GaussianSummary:
    """Mean and (N - 1)-normalised covariance of an (N, d) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise ValueError(f"need at least 2 feature vectors, got shape {features.shape}")
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    return GaussianSummary(features.mean(axis=0), (cov + cov.T) / 2.0)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Tr (S_a S_b)^(1/2) is evaluated as Tr (A S_b A)^(1/2) with A = S_a^(1/2):
    the symmetric product has the same spectrum as S_a S_b, so a symmetric
    eigendecomposition suffices; negative eigenvalues are clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"frechet_distance: dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov)
    mid = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((mid + mid.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def pooled_features(encoder: PerceptualEncoder, images: np.ndarray) -> np.ndarray:
    """Global-average-pooled deepest encoder features, shape (N, 64)."""
    return encoder.encode_array(np.asarray(images, dtype=np.float64))[-1].mean(axis=(2, 3))


def proxy_fid_features(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    return frechet_distance(summarize(feat_a), summarize(feat_b))


def proxy_fid(encoder: PerceptualEncoder, set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Frechet distance between pooled encoder features of two image sets (model range)."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("proxy_fid needs at least 2 images per set")
    return proxy_fid_features(pooled_features(encoder, set_a), pooled_features(encoder, set_b))


def _unit_channels(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
    return f / np.maximum(norm, eps)


def perceptual_distance(encoder: PerceptualEncoder, img_a: np.ndarray, img_b: np.ndarray) -> np.ndarray:
    """Per-pair distance: sum over levels of the mean squared difference of unit-normalised features.

    Accepts single images (C, H, W) or batches (N, C, H, W); returns a scalar
    or an (N,) array accordingly.
    """
    a, b = np.asarray(img_a, dtype=np.float64), np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"perceptual_distance: shape mismatch {a.shape} vs {b.shape}")
    single = a.ndim == 3
    if single:
        a, b = a[None], b[None]
    fa, fb = encoder.encode_array(a), encoder.encode_array(b)
    total = np.zeros(len(a))
    for la, lb in zip(fa, fb):
        total += ((_unit_channels(la) - _unit_channels(lb)) ** 2).mean(axis=(1, 2, 3))
    return float(total[0]) if single else total


def count_params(p: ParamSet) -> int:
    return p.scalar_count()


def conv_macs(kind: str, cin: int, cout: int, k: int, h_out: int, w_out: int) -> int:
    if kind == "depthwise_separable":
        return cin * k * k * h_out * w_out + cout * cin * h_out * w_out
    return cout * cin * k * k * h_out * w_out


def count_macs(model, resolution: int = 32) -> int:
    """Closed-form per-image multiply-accumulates of the model's conv / dense layers."""
    if isinstance(model, Discriminator):
        return sum(fan_in * fan_out for _, fan_in, fan_out in model.dense_specs())
    return sum(conv_macs(s.kind, s.cin, s.cout, s.k, s.h_out, s.w_out) for s in model.conv_specs(resolution))


def count_flops(model, resolution: int = 32) -> int:
    return 2 * count_macs(model, resolution)


def instrumented_macs(model, resolution: int = 32, seed: int = 0) -> int:
    """MACs counted inside the conv / dense ops during one real forward pass."""
    rng = np.random.default_rng(seed)
    with ad.no_grad(), ad.MacCounter() as counter:
        if isinstance(model, Discriminator):
            model.forward(Tensor(rng.normal(size=(2, model.channels, model.channels))))
        elif isinstance(model, Generator):
            mixed = [
                Tensor(rng.normal(size=(2, c, resolution >> i, resolution >> i)))
                for i, c in enumerate(model.level_channels)
            ]
            model.forward(mixed, training=False, update_state=False)
        else:
            model.encode(Tensor(rng.normal(size=(2, model.in_channels, resolution, resolution))))
    return counter.macs


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records: Sequence) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        row = r.as_row() if hasattr(r, "as_row") else r
        writer.writerow([_fmt(row[k]) for k in CSV_HEADER])
    return buf.getvalue()


def _svg_chart(records: Sequence) -> str:
    rows = [r.as_row() if hasattr(r, "as_row") else r for r in records]
    series: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        series.setdefault(str(row["strategy"]), []).append((float(row["round"]), float(row["mean_proxy_fid"])))
    width, height, pad = 480, 320, 40
    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    ys = [y for pts in series.values() for _, y in pts if np.isfinite(y)] or [0.0, 1.0]
    x0, x1 = min(xs), max(max(xs), min(xs) + 1)
    y0, y1 = min(0.0, min(ys)), max(max(ys), 1e-12)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad), height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">round</text>',
        f'<text x="12" y="{pad - 12}" font-size="12">mean proxy-FID</text>',
    ]
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = palette[i % len(palette)]
        coords = " ".join(f"{a:.1f},{b:.1f}" for a, b in (px(x, y) for x, y in sorted(pts)))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" fill="{color}" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(records: Sequence, path: str | os.PathLike, svg: bool = True) -> list[Path]:
    """Write the records CSV (and an SVG of proxy-FID per round); returns the files written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_csv(records))
    written = [path]
    if svg:
        svg_path = path.with_suffix(".svg")
        svg_path.write_text(_svg_chart(records))
        written.append(svg_path)
    return written


def client_proxy_fid(client, student: bool = False) -> float:
    """Proxy FID between a client's generated sketches and its own reference sketches."""
    generated = client.generate_array(student=student)
    return proxy_fid(client.encoder, generated, client.sketches)


def mean_proxy_fid(clients: Sequence) -> float:
    return float(np.mean([client_proxy_fid(c) for c in clients]))


def mean_perceptual(clients: Sequence) -> float:
    """Mean per-pair perceptual distance between generated and reference sketches."""
    return float(np.mean([perceptual_distance(c.encoder, c.generate_array(), c.sketches).mean() for c in clients]))
