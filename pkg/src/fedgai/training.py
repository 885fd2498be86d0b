"""Local optimisation loops: teacher GAN epochs, student distillation, federated local rounds."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .models import (
    Discriminator,
    Generator,
    PerceptualEncoder,
    StyleStats,
    adain_sd,
    compute_style_stats,
    pooled_final,
    trainable,
)
from .params import BN_KINDS, ParamSet, export_params, import_params

logger = logging.getLogger(__name__)

STRATEGIES = ("fedgai", "fedavg", "fedprox", "fedyogi")


class ProtocolError(RuntimeError):
    """A client and the server disagree about what is being exchanged."""


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    n_iter: int = 11
    batch_size: int = 8
    seed: int = 0
    momentum: float = 0.0
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


class SGD:
    """Plain SGD with optional heavy-ball momentum; updates ``tensor.data`` in place."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params] if momentum else []

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                buf = self.buffers[i]
                buf *= self.momentum
                buf += g
                g = buf
            p.data -= self.lr * g


def to_model_range(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * 2.0 - 1.0


def from_model_range(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def sketch_to_model(s: np.ndarray) -> np.ndarray:
    """Ink-valued sketches (ink 1 on 0) to model range as dark ink on white paper."""
    return 1.0 - 2.0 * np.asarray(s, dtype=np.float64)


def sketch_from_model(m: np.ndarray) -> np.ndarray:
    return (1.0 - np.asarray(m, dtype=np.float64)) / 2.0


class ClientState:
    """One designer: data, cached encoder features, style stats, models and optimiser state.

    ``images`` (N, 3, H, W) and ``sketches`` (N, 1, H, W, ink = 1) are given
    in ``[0, 1]`` and stored in model range ``[-1, 1]``, where both share a
    white (+1) background.
    """

    def __init__(self, client_id: str, images, sketches, encoder: PerceptualEncoder, seed: int = 0):
        images, sketches = np.asarray(images), np.asarray(sketches)
        if len(images) == 0:
            raise ValueError(f"client {client_id}: empty dataset")
        if len(images) != len(sketches):
            raise ValueError(f"client {client_id}: {len(images)} images vs {len(sketches)} sketches")
        self.client_id = client_id
        self.seed = seed
        self.encoder = encoder
        self.images = to_model_range(images)
        self.sketches = sketch_to_model(sketches)
        self.f_r = encoder.encode_array(self.images)
        self.f_s = encoder.encode_array(self.sketches)
        self.stats: StyleStats = compute_style_stats(None, self.f_s)
        g_seed, d_seed, s_seed, b_seed = np.random.SeedSequence(seed).generate_state(4)
        self.generator = Generator(seed=int(g_seed))
        self.discriminator = Discriminator(seed=int(d_seed))
        self.student: Generator | None = None
        self.student_disc: Discriminator | None = None
        self._student_seed = int(s_seed)
        self.rng = np.random.default_rng(int(b_seed))
        self._opts: dict[str, SGD] = {}

    def __len__(self) -> int:
        return len(self.images)

    def optimizer(self, key: str, model, cfg: TrainConfig) -> SGD:
        opt = self._opts.get(key)
        if opt is None or opt.momentum != cfg.momentum:
            opt = self._opts[key] = SGD(trainable(model.named_params()), cfg.learning_rate, cfg.momentum)
        opt.lr = cfg.learning_rate
        return opt

    def batches(self, batch_size: int):
        """One seeded shuffle pass; the last partial batch is kept."""
        order = self.rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield order[start : start + batch_size]

    def features(self, idx):
        return [Tensor(l[idx]) for l in self.f_r], [Tensor(l[idx]) for l in self.f_s]

    def mixed(self, idx) -> list[Tensor]:
        return adain_sd([l[idx] for l in self.f_r], self.stats)

    def init_student(self) -> None:
        """Fresh student generator and a discriminator copied from the teacher's."""
        self.student = Generator(seed=self._student_seed, student=True)
        self.student_disc = Discriminator(seed=self.discriminator.seed)
        import_params(self.student_disc, export_params(self.discriminator))

    def generate_array(self, images=None, student: bool = False, chunk: int = 64) -> np.ndarray:
        """Eval-mode sketches in model range for ``images`` (model range) or the client's own."""
        g = self.student if student else self.generator
        imgs = self.images if images is None else images
        out = []
        with ad.no_grad():
            for start in range(0, len(imgs), chunk):
                f_r = self.encoder.encode_array(imgs[start : start + chunk])
                sketch, _ = g.forward(adain_sd(f_r, self.stats), training=False, update_state=False)
                out.append(sketch.data)
        return np.concatenate(out, axis=0)


def _detach(levels: Sequence[Tensor]) -> list[Tensor]:
    return [Tensor(f.data) for f in levels]


def prox_term(model, anchor: Mapping[str, np.ndarray], mu: float) -> Tensor | None:
    """(mu / 2) * sum ||w - w_anchor||^2 over the model's trainable entries in ``anchor``."""
    terms = [
        ad.frobenius_norm_sq(ad.sub(t, Tensor(anchor[name])))
        for name, _, t in model.named_params()
        if t.requires_grad and name in anchor
    ]
    if not terms or mu == 0:
        return None
    return ad.scale(L._sum(terms), mu / 2.0)


def teacher_step(
    client: ClientState,
    idx: np.ndarray,
    cfg: TrainConfig,
    decorr: bool = False,
    anchor: Mapping[str, np.ndarray] | None = None,
    mu: float = 0.0,
) -> dict[str, float]:
    """One D step then one G step on the batch ``idx``."""
    w = cfg.loss_weights
    g, d = client.generator, client.discriminator
    opt_g, opt_d = client.optimizer("g", g, cfg), client.optimizer("d", d, cfg)
    f_r, f_s = client.features(idx)
    mixed = client.mixed(idx)

    sketch, _ = g.forward(mixed, training=True, update_state=True)
    f_g = client.encoder.encode(sketch)

    opt_d.zero_grad()
    l_d = L.discriminator_loss(d, f_s, _detach(f_g))
    prox_d = prox_term(d, anchor, mu) if anchor is not None else None
    ad.backward(l_d if prox_d is None else ad.add(l_d, prox_d))
    opt_d.step()

    opt_g.zero_grad()
    l_gram = L.gram_loss(f_s, f_g)
    l_adv = ad.add(L.generator_adv_loss(d, f_g), L.feature_distance(f_g, mixed))
    l_clip = L.clip_loss_from_levels(f_g, f_s, f_r)
    total = L.total_gan_loss(l_gram, l_adv, l_clip, w)
    l_dec = None
    if decorr and w.beta > 0:
        if len(idx) >= 2:
            l_dec = L.feddecorr(pooled_final(f_g[-1]))
            total = L.fed_total(total, l_dec, w.beta)
        else:
            logger.debug("skipping decorrelation term on a batch of one")
    prox_g = prox_term(g, anchor, mu) if anchor is not None else None
    if prox_g is not None:
        total = ad.add(total, prox_g)
    ad.backward(total)
    opt_g.step()
    # the G backward also reached D's parameters; leave no stale gradients behind
    opt_d.zero_grad()
    return {
        "gram": l_gram.item(),
        "adv_d": l_d.item(),
        "adv_g": l_adv.item(),
        "clip": l_clip.item(),
        "decorr": l_dec.item() if l_dec is not None else 0.0,
        "total": total.item(),
    }


def _mean_losses(rows: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def train_teacher_epoch(client: ClientState, cfg: TrainConfig, **step_kwargs) -> dict[str, float]:
    """One shuffled pass over the client's pairs; returns the mean of each loss term."""
    if len(client) == 0:
        raise ValueError("empty dataset")
    rows = [teacher_step(client, idx, cfg, **step_kwargs) for idx in client.batches(cfg.batch_size)]
    return _mean_losses(rows)


def distill_step(client: ClientState, idx: np.ndarray, cfg: TrainConfig) -> dict[str, float]:
    teacher, student, d_s = client.generator, client.student, client.student_disc
    opt_s, opt_ds = client.optimizer("student", student, cfg), client.optimizer("student_d", d_s, cfg)
    _, f_s = client.features(idx)
    mixed = client.mixed(idx)
    with ad.no_grad():
        # batch statistics like the student, but leave the teacher's buffers alone
        _, t_inter = teacher.forward(mixed, training=True, update_state=False)
    sketch, s_inter = student.forward(mixed, training=True, update_state=True)
    f_g = client.encoder.encode(sketch)

    opt_ds.zero_grad()
    l_ds = L.student_disc_loss(d_s, f_s, _detach(f_g))
    ad.backward(l_ds)
    opt_ds.step()

    opt_s.zero_grad()
    l_local = L.distill_local(t_inter, s_inter)
    l_global = L.distill_global(f_g, f_s)
    l_adv = L.generator_adv_loss(d_s, f_g)
    ad.backward(L._sum([l_local, l_global, l_adv]))
    opt_s.step()
    opt_ds.zero_grad()
    return {
        "local": l_local.item(),
        "global": l_global.item(),
        "d_s": l_ds.item(),
        "adv_g": l_adv.item(),
        "kd": L.kd_total(l_local.item(), l_global.item(), l_ds.item()),
    }


def distill_student(client: ClientState, cfg: TrainConfig, epochs: int = 1) -> list[dict[str, float]]:
    """Train ``client.student`` against the frozen teacher; returns per-epoch mean losses."""
    if client.student is None:
        client.init_student()
    missing = set(Generator.INTERMEDIATES) ^ set(client.student.INTERMEDIATES)
    if missing:
        raise ad.ShapeError(f"teacher/student intermediate names differ: {sorted(missing)}")
    history = []
    for _ in range(epochs):
        rows = [distill_step(client, idx, cfg) for idx in client.batches(cfg.batch_size)]
        history.append(_mean_losses(rows))
    return history


def upload_scope(strategy: str) -> tuple[tuple[str, ...], frozenset]:
    """Roles uploaded and kinds withheld under ``strategy``."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "fedgai":
        return ("discriminator",), BN_KINDS
    return ("generator", "discriminator"), frozenset()


def client_upload(client: ClientState, strategy: str = "fedgai") -> ParamSet:
    roles, excl = upload_scope(strategy)
    return export_params([client.generator, client.discriminator], roles=roles, exclude_kinds=excl)


def check_layer_table(expected: ParamSet, received: ParamSet) -> None:
    """Raise :class:`ProtocolError` naming the first entry where the two tables diverge."""
    exp = [e for e in expected if e.kind not in BN_KINDS]
    got = [e for e in received if e.kind not in BN_KINDS]
    for a, b in zip(exp, got):
        if (a.name, a.role, a.kind, a.shape) != (b.name, b.role, b.kind, b.shape):
            raise ProtocolError(
                f"layer table diverges at {a.name!r}: expected {(a.role, a.kind, a.shape)}, "
                f"received {b.name!r} {(b.role, b.kind, b.shape)}"
            )
    if len(exp) != len(got):
        first = exp[len(got)].name if len(exp) > len(got) else got[len(exp)].name
        raise ProtocolError(f"layer table diverges at {first!r}: {len(exp)} expected vs {len(got)} received entries")


def local_round(
    client: ClientState,
    fused: ParamSet | None,
    cfg: TrainConfig,
    strategy: str = "fedgai",
    mu: float = 0.0,
) -> ParamSet:
    """Load the fused parameters, train ``cfg.n_iter`` epochs on L_Fed, return the upload.

    Under ``fedgai`` only discriminator entries are exchanged and BatchNorm
    kinds never leave or enter the client. ``fused=None`` trains from the
    client's current state.
    """
    roles, excl = upload_scope(strategy)
    models = [client.generator, client.discriminator]
    anchor = None
    if fused is not None:
        check_layer_table(client_upload(client, strategy), fused)
        skip = BN_KINDS if strategy == "fedgai" else ()
        import_params(models, fused, skip_kinds=skip)
        if strategy == "fedprox" and mu > 0:
            anchor = {e.name: e.values.copy() for e in fused}
    for _ in range(cfg.n_iter):
        train_teacher_epoch(client, cfg, decorr=True, anchor=anchor, mu=mu)
    return export_params(models, roles=roles, exclude_kinds=excl)
