"""Objective terms for teacher training, distillation and federated rounds."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .models import GRAM_LEVEL, Discriminator, pooled_final

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    gamma_gram: float = 50.0
    gamma_adv: float = 1.0
    gamma_clip: float = 25.0
    beta: float = 0.1

    def __post_init__(self):
        for name in ("gamma_gram", "gamma_adv", "gamma_clip", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def gram(f: Tensor) -> Tensor:
    """Per-sample Gram matrix F F^T / (C H W) of an (N, C, H, W) tensor."""
    if f.ndim != 4:
        raise ShapeError(f"gram: expected 4-D features, got {f.shape}")
    n, c, h, w = f.shape
    flat = ad.reshape(f, (n, c, h * w))
    return ad.scale(ad.matmul(flat, ad.transpose_last(flat)), 1.0 / (c * h * w))


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _check_levels(op: str, a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise ShapeError(f"{op}: level count mismatch {len(a)} vs {len(b)}")
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def gram_loss(f_s: Sequence[Tensor], f_g: Sequence[Tensor]) -> Tensor:
    _check_levels("gram_loss", f_s, f_g)
    return _sum([ad.mse(gram(a), gram(b)) for a, b in zip(f_s, f_g)])


def feature_distance(a: Sequence[Tensor], b: Sequence[Tensor]) -> Tensor:
    """Sum over levels of the mean squared feature difference."""
    _check_levels("feature_distance", a, b)
    return _sum([ad.mse(x, y) for x, y in zip(a, b)])


def _neg_log(p: Tensor) -> Tensor:
    return ad.scale(ad.tensor_mean(ad.log(ad.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))), -1.0)


def _neg_log_one_minus(p: Tensor) -> Tensor:
    q = ad.add_scalar(ad.scale(p, -1.0), 1.0)
    return _neg_log(q)


def disc_loss_from_probs(p_real: Tensor, p_fake: Tensor) -> Tensor:
    """-E[log p_real] - E[log(1 - p_fake)] with probability clamping."""
    return ad.add(_neg_log(p_real), _neg_log_one_minus(p_fake))


def discriminator_loss(d: Discriminator, f_real: Sequence[Tensor], f_fake: Sequence[Tensor]) -> Tensor:
    return disc_loss_from_probs(d(gram(f_real[GRAM_LEVEL])), d(gram(f_fake[GRAM_LEVEL])))


def generator_adv_loss(d: Discriminator, f_fake: Sequence[Tensor]) -> Tensor:
    return _neg_log(d(gram(f_fake[GRAM_LEVEL])))


def adversarial_losses(d: Discriminator, f_s, f_g, f_m) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(L_D, L_G, L_D + L_G)`` for the teacher GAN."""
    l_d = discriminator_loss(d, f_s, f_g)
    l_g = ad.add(generator_adv_loss(d, f_g), feature_distance(f_g, f_m))
    return l_d, l_g, ad.add(l_d, l_g)


def clip_loss(f_g_final: Tensor, f_s_final: Tensor, f_g_4: Tensor, f_r_4: Tensor) -> Tensor:
    """(1 - mean cosine of final embeddings) + MSE of deepest maps."""
    if f_g_final.ndim == 1:
        f_g_final = ad.reshape(f_g_final, (1, -1))
        f_s_final = ad.reshape(f_s_final, (1, -1))
    norms = np.linalg.norm(f_g_final.data, axis=1) * np.linalg.norm(f_s_final.data, axis=1)
    if np.any(norms <= 1e-12):
        logger.warning("clip_loss: zero-norm embedding; cosine term set to maximal dissimilarity")
    cos = ad.tensor_mean(ad.cosine_similarity(f_g_final, f_s_final))
    return ad.add(ad.add_scalar(ad.scale(cos, -1.0), 1.0), ad.mse(f_g_4, f_r_4))


def clip_loss_from_levels(f_g: Sequence[Tensor], f_s: Sequence[Tensor], f_r: Sequence[Tensor]) -> Tensor:
    return clip_loss(pooled_final(f_g[-1]), pooled_final(f_s[-1]), f_g[-1], f_r[-1])


def total_gan_loss(l_gram, l_adv, l_clip, w: LossWeights = LossWeights()):
    """Weighted sum gamma_gram*gram + gamma_adv*adv + gamma_clip*clip (floats or tensors)."""
    if isinstance(l_gram, Tensor):
        return _sum([ad.scale(l_gram, w.gamma_gram), ad.scale(l_adv, w.gamma_adv), ad.scale(l_clip, w.gamma_clip)])
    return w.gamma_gram * l_gram + w.gamma_adv * l_adv + w.gamma_clip * l_clip


def distill_local(teacher_inter: Mapping[str, Tensor], student_inter: Mapping[str, Tensor]) -> Tensor:
    """Sum of MSEs between matching teacher/student intermediates."""
    if set(teacher_inter) != set(student_inter):
        raise ShapeError(
            f"distill_local: intermediate names differ {sorted(teacher_inter)} vs {sorted(student_inter)}"
        )
    terms = []
    for name in sorted(teacher_inter):
        t, s = teacher_inter[name], student_inter[name]
        if t.shape != s.shape:
            raise ShapeError(f"distill_local: {name} shape mismatch {t.shape} vs {s.shape}")
        terms.append(ad.mse(t, s))
    return _sum(terms)


def distill_global(f_g_student: Sequence[Tensor], f_s: Sequence[Tensor]) -> Tensor:
    return feature_distance(f_g_student, f_s)


def student_disc_loss(d_s: Discriminator, f_s, f_g_student) -> Tensor:
    return discriminator_loss(d_s, f_s, f_g_student)


def kd_total(local, global_, d_s):
    if isinstance(local, Tensor):
        return _sum([local, global_, d_s])
    return local + global_ + d_s


def feddecorr(features: Tensor, eps: float = 1e-8) -> Tensor:
    """(1/d^2) * ||CM||_F^2 with CM the correlation matrix of z-scored columns."""
    if features.ndim != 2:
        raise ShapeError(f"feddecorr: expected (N, d) features, got {features.shape}")
    n, d = features.shape
    if n < 2:
        raise ValueError("insufficient batch for decorrelation")
    z = ad.standardize_columns(features, eps=eps)
    cm = ad.scale(ad.matmul(ad.transpose_last(z), z), 1.0 / n)
    return ad.scale(ad.frobenius_norm_sq(cm), 1.0 / (d * d))


def fed_total(l_kd, l_decorr, beta: float):
    if isinstance(l_kd, Tensor):
        return ad.add(l_kd, ad.scale(l_decorr, beta))
    return l_kd + beta * l_decorr
