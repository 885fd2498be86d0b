"""Server-side aggregation, fusion sessions and round orchestration."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .metrics import mean_perceptual, mean_proxy_fid
from .netsim import LinkModel, RoundRecord, round_latency
from .params import BN_KINDS, ParamEntry, ParamSet, decode, encode, import_params
from .training import (
    STRATEGIES,
    ClientState,
    ProtocolError,
    TrainConfig,
    check_layer_table,
    client_upload,
    local_round,
)

logger = logging.getLogger(__name__)


def _check_tables(uploads: Sequence[ParamSet]) -> None:
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    ref = uploads[0].layer_table()
    for k, u in enumerate(uploads[1:], start=1):
        table = u.layer_table()
        for a, b in zip(ref, table):
            if a != b:
                raise ProtocolError(f"upload {k} diverges at {a[0]!r}: {a[1:]} vs {b}")
        if len(ref) != len(table):
            raise ProtocolError(f"upload {k} has {len(table)} entries, expected {len(ref)}")


def aggregate_fedavg(uploads: Sequence[ParamSet], weights: Sequence[float] | None = None) -> ParamSet:
    """Entrywise weighted mean (uniform by default).

    Values are sorted across uploads before summation and accumulated as
    offsets from the smallest, so the result does not depend on upload order
    and identical uploads come back bit-exactly.
    """
    _check_tables(uploads)
    k = len(uploads)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"weights must be {k} nonnegative values with a positive sum")
    out = ParamSet()
    for i, first in enumerate(uploads[0]):
        stack = np.stack([u.entries[i].values for u in uploads])
        order = np.argsort(stack, axis=0, kind="stable")
        vals = np.take_along_axis(stack, order, axis=0)
        wts = w[order]
        base = vals[0]
        mean = base + (wts * (vals - base)).sum(axis=0) / w.sum()
        out.append(ParamEntry(first.name, first.role, first.kind, mean))
    return out


def aggregate_fedgai(uploads: Sequence[ParamSet]) -> ParamSet:
    """Uniform mean of discriminator-only, BatchNorm-free uploads."""
    for u in uploads:
        for e in u:
            if e.kind in BN_KINDS:
                raise ProtocolError(f"BatchNorm parameters must remain local (got {e.name!r})")
            if e.role != "discriminator":
                raise ProtocolError(f"only discriminator entries may be uploaded (got {e.role} entry {e.name!r})")
    return aggregate_fedavg(uploads)


def fedprox_penalty(local: ParamSet, global_: ParamSet, mu: float) -> float:
    """(mu / 2) * sum ||w_local - w_global||^2 over shared entries."""
    if mu == 0:
        return 0.0
    total = 0.0
    for e in local:
        if e.name in global_:
            diff = e.values - global_[e.name].values
            total += float((diff * diff).sum())
    return 0.5 * mu * total


@dataclass
class ServerOptState:
    """FedYogi server moments, one array per aggregated entry."""

    beta1: float = 0.9
    beta2: float = 0.99
    eta: float = 1e-2
    tau: float = 1e-3
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def fedyogi_step(state: ServerOptState, current: ParamSet, mean_upload: ParamSet) -> ParamSet:
    """One Yogi server update treating ``mean_upload - current`` as the pseudo-gradient."""
    _check_tables([current, mean_upload])
    out = ParamSet()
    for cur, upd in zip(current, mean_upload):
        delta = upd.values - cur.values
        m = state.m.get(cur.name)
        if m is None:
            m = np.zeros_like(delta)
            state.v[cur.name] = np.full_like(delta, state.tau**2)
        v = state.v[cur.name]
        m = state.beta1 * m + (1.0 - state.beta1) * delta
        d2 = delta * delta
        v = v - (1.0 - state.beta2) * d2 * np.sign(v - d2)
        state.m[cur.name], state.v[cur.name] = m, v
        out.append(ParamEntry(cur.name, cur.role, cur.kind, cur.values + state.eta * m / (np.sqrt(v) + state.tau)))
    return out


# --- sessions -----------------------------------------------------------------------


@dataclass
class FusionSession:
    requesters: tuple[str, ...]
    sources: tuple[str, ...]
    strategy: str = "fedgai"
    max_rounds: int = 11
    mu: float = 0.0
    tol: float = 0.01
    window: int = 3
    t: int = 0
    fused: ParamSet | None = None
    server_params: ParamSet | None = None
    server_state: ServerOptState = field(default_factory=ServerOptState)
    history: list[float] = field(default_factory=list)
    records: list[RoundRecord] = field(default_factory=list)
    # (round, sender, receiver, layer table) for every simulated message
    messages: list[tuple[int, str, str, list]] = field(default_factory=list)
    failed: bool = False

    @property
    def participants(self) -> tuple[str, ...]:
        return self.sources + tuple(r for r in self.requesters if r not in self.sources)


def open_fusion_session(
    registered: Sequence[str],
    requesters: Sequence[str],
    sources: Sequence[str],
    strategy: str = "fedgai",
    max_rounds: int = 11,
    **kwargs,
) -> FusionSession:
    """Validate ids and strategy; only ``sources`` upload, everyone involved receives the fused model."""
    if not sources:
        raise ValueError("a fusion session needs at least one style source")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if max_rounds < 0:
        raise ValueError("max_rounds must be >= 0")
    known = set(registered)
    for cid in list(requesters) + list(sources):
        if cid not in known:
            raise KeyError(f"unknown client id {cid!r}")
    return FusionSession(tuple(dict.fromkeys(requesters)), tuple(dict.fromkeys(sources)), strategy, max_rounds, **kwargs)


def satisfaction_check(session: FusionSession, history: Sequence[float] | None = None) -> str:
    """``"converged"`` at the round cap or once the last ``window`` values have plateaued.

    A plateau means every consecutive relative improvement inside the window
    is below ``tol`` (a worsening counts as no improvement).
    """
    history = session.history if history is None else list(history)
    if session.t >= session.max_rounds:
        return "converged"
    if len(history) >= max(session.window, 2):
        tail = history[-session.window :]
        gains = [(a - b) / max(abs(a), 1e-12) for a, b in zip(tail[:-1], tail[1:])]
        if all(g < session.tol for g in gains):
            return "converged"
    return "continue"


def _aggregate(session: FusionSession, uploads: list[ParamSet]) -> ParamSet:
    if session.strategy == "fedgai":
        return aggregate_fedgai(uploads)
    mean = aggregate_fedavg(uploads)
    if session.strategy != "fedyogi":
        return mean
    if session.server_params is None:
        # the server model starts from the first round's mean upload
        session.server_params = mean
    session.server_params = fedyogi_step(session.server_state, session.server_params, mean)
    return session.server_params


def run_round(
    session: FusionSession,
    clients: Mapping[str, ClientState],
    cfg: TrainConfig,
    link: LinkModel = LinkModel(),
    jobs: int = 1,
    evaluate: bool = True,
) -> RoundRecord:
    """Local rounds on every participant, aggregation of the sources' uploads, broadcast, accounting."""
    if session.failed:
        raise ProtocolError("session aborted by an earlier failure")
    if session.t >= session.max_rounds:
        raise ProtocolError(f"session already ran its {session.max_rounds} rounds")
    session.t += 1
    t = session.t
    record = RoundRecord(round=t, client_count=len(session.participants), strategy=session.strategy, n_iter=cfg.n_iter)
    started = time.perf_counter()

    def work(cid):
        return local_round(clients[cid], session.fused, cfg, strategy=session.strategy, mu=session.mu)

    try:
        ids = session.participants
        if jobs > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = dict(zip(ids, pool.map(work, ids)))
        else:
            results = {cid: work(cid) for cid in ids}
        record.local_compute_s = time.perf_counter() - started

        up_sizes, uploads = [], []
        for cid in session.sources:
            raw = encode(results[cid])
            received = decode(raw)
            session.messages.append((t, cid, "server", received.layer_table()))
            up_sizes.append(len(raw) + link.per_message_overhead_bytes)
            uploads.append(received)
        fused = _aggregate(session, uploads)
        raw = encode(fused)
        down_sizes = []
        for cid in session.participants:
            delivered = decode(raw)
            session.messages.append((t, "server", cid, delivered.layer_table()))
            down_sizes.append(len(raw) + link.per_message_overhead_bytes)
            client = clients[cid]
            check_layer_table(client_upload(client, session.strategy), delivered)
            skip = BN_KINDS if session.strategy == "fedgai" else ()
            import_params([client.generator, client.discriminator], delivered, skip_kinds=skip)
        session.fused = decode(raw)
    except ProtocolError as exc:
        logger.error("round %d failed: %s", t, exc)
        session.failed = True
        record.failed = True
        session.records.append(record)
        return record

    record.bytes_up, record.bytes_down = sum(up_sizes), sum(down_sizes)
    record.upload_s, record.aggregate_s, record.download_s = round_latency(
        link, up_sizes, down_sizes, aggregated_scalars=sum(u.scalar_count() for u in uploads)
    )
    record.wall_time_total = record.upload_s + record.aggregate_s + record.download_s
    if evaluate:
        involved = [clients[c] for c in session.participants]
        record.mean_proxy_fid = mean_proxy_fid(involved)
        record.mean_lpips_proxy = mean_perceptual(involved)
        session.history.append(record.mean_proxy_fid)
    session.records.append(record)
    return record


def run_session(
    session: FusionSession,
    clients: Mapping[str, ClientState],
    cfg: TrainConfig,
    link: LinkModel = LinkModel(),
    jobs: int = 1,
) -> list[RoundRecord]:
    """Run rounds until the round cap or the plateau rule; returns this session's records."""
    while session.t < session.max_rounds:
        record = run_round(session, clients, cfg, link, jobs)
        if record.failed or satisfaction_check(session) == "converged":
            break
    return session.records
