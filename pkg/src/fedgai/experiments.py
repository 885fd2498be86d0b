"""Experiment drivers behind the CLI: data generation, local training, distillation, FL runs, sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .federated import FusionSession, open_fusion_session, run_round, satisfaction_check
from .losses import LossWeights
from .metrics import client_proxy_fid, count_macs, emit_report, perceptual_distance
from .models import PerceptualEncoder
from .params import export_params, import_params, read_checkpoint, write_checkpoint
from .synthdata import StyleProfile, generate_dataset, load_dataset, save_dataset
from .netsim import aggregated_param_count
from .training import ClientState, TrainConfig, client_upload, distill_student, train_teacher_epoch

logger = logging.getLogger(__name__)


class Layout:
    """``root/{data, checkpoints, records, report}``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.checkpoints = self.root / "checkpoints"
        self.records = self.root / "records"
        self.report = self.root / "report"

    def make(self) -> "Layout":
        for d in (self.data, self.checkpoints, self.records, self.report):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def checkpoint(self, client: str, role: str, round_: int) -> Path:
        return self.checkpoints / f"{client}_{role}_{round_}.fgai"


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(layout: Layout, command: str, cfg: ExperimentConfig, **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "source_sha256": source_digest(),
        "config": cfg.to_dict(),
        **extra,
    }
    path = layout.root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def train_config(cfg: ExperimentConfig, n_iter: int | None = None) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        n_iter=cfg.n_iter if n_iter is None else n_iter,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        momentum=cfg.momentum,
        loss_weights=LossWeights(cfg.gamma_gram, cfg.gamma_adv, cfg.gamma_clip, cfg.beta),
    )


def client_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def sweep_profiles(profiles: Sequence[StyleProfile], k: int) -> list[StyleProfile]:
    """The first ``k`` profiles, cycling through the list with shifted seeds when it is shorter."""
    out = []
    for i in range(k):
        base = profiles[i % len(profiles)]
        rep = i // len(profiles)
        out.append(base if rep == 0 else replace(base, name=f"{base.name}{rep}", seed=base.seed + 1000 * rep))
    return out


def ensure_data(cfg: ExperimentConfig, layout: Layout, profiles: Sequence[StyleProfile]) -> None:
    for prof in profiles:
        target = layout.data / prof.name
        if not (target / "manifest.json").exists():
            save_dataset(generate_dataset(prof, cfg.n_pairs, cfg.resolution), target)


def build_clients(cfg: ExperimentConfig, layout: Layout, profiles: Sequence[StyleProfile] | None = None):
    profiles = list(cfg.clients if profiles is None else profiles)
    ensure_data(cfg, layout, profiles)
    encoder = PerceptualEncoder(seed=cfg.encoder_seed)
    clients = {}
    for i, prof in enumerate(profiles):
        ds = load_dataset(layout.data / prof.name)
        clients[prof.name] = ClientState(prof.name, ds.images, ds.sketches, encoder, seed=client_seed(cfg.seed, i))
    return clients


def _parallel(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def pretrain(clients: dict, tcfg: TrainConfig, epochs: int, jobs: int = 1) -> dict[str, list[dict]]:
    def work(cid):
        return [train_teacher_epoch(clients[cid], tcfg) for _ in range(epochs)]

    ids = list(clients)
    return dict(zip(ids, _parallel(work, ids, jobs)))


def save_models(layout: Layout, clients: dict, round_: int, student: bool = False) -> None:
    for cid, c in clients.items():
        if student:
            write_checkpoint(layout.checkpoint(cid, "student-generator", round_), export_params(c.student))
            write_checkpoint(layout.checkpoint(cid, "student-discriminator", round_), export_params(c.student_disc))
        else:
            write_checkpoint(layout.checkpoint(cid, "generator", round_), export_params(c.generator))
            write_checkpoint(layout.checkpoint(cid, "discriminator", round_), export_params(c.discriminator))


def load_models(layout: Layout, clients: dict, round_: int) -> None:
    for cid, c in clients.items():
        for role, model in (("generator", c.generator), ("discriminator", c.discriminator)):
            path = layout.checkpoint(cid, role, round_)
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint {path}; run train-local first")
            import_params(model, read_checkpoint(path))


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])


# --- commands ----------------------------------------------------------------------


def gen_data(cfg: ExperimentConfig, layout: Layout) -> None:
    for prof in cfg.clients:
        save_dataset(generate_dataset(prof, cfg.n_pairs, cfg.resolution), layout.data / prof.name)


def train_local(cfg: ExperimentConfig, layout: Layout, jobs: int = 1) -> dict:
    clients = build_clients(cfg, layout)
    history = pretrain(clients, train_config(cfg), cfg.pretrain_epochs, jobs)
    rows = []
    for cid, epochs in history.items():
        for e, losses in enumerate(epochs, start=1):
            rows.append({"client": cid, "epoch": e, **losses})
    header = ["client", "epoch", "gram", "adv_d", "adv_g", "clip", "decorr", "total"]
    _write_rows(layout.records / "train_local.csv", header, rows)
    fids = [{"client": cid, "proxy_fid": client_proxy_fid(c)} for cid, c in clients.items()]
    _write_rows(layout.records / "train_local_fid.csv", ["client", "proxy_fid"], fids)
    save_models(layout, clients, 0)
    return clients


def distill(cfg: ExperimentConfig, layout: Layout, jobs: int = 1) -> dict:
    clients = build_clients(cfg, layout)
    load_models(layout, clients, 0)
    tcfg = train_config(cfg)
    history = dict(zip(clients, _parallel(lambda cid: distill_student(clients[cid], tcfg, cfg.distill_epochs), list(clients), jobs)))
    rows = [{"client": cid, "epoch": e, **h} for cid, hs in history.items() for e, h in enumerate(hs, start=1)]
    _write_rows(layout.records / "distill.csv", ["client", "epoch", "local", "global", "d_s", "adv_g", "kd"], rows)
    summary = []
    for cid, c in clients.items():
        summary.append(
            {
                "client": cid,
                "teacher_macs": count_macs(c.generator, cfg.resolution),
                "student_macs": count_macs(c.student, cfg.resolution),
                "teacher_proxy_fid": client_proxy_fid(c),
                "student_proxy_fid": client_proxy_fid(c, student=True),
            }
        )
    _write_rows(layout.records / "compression.csv", list(summary[0]), summary)
    save_models(layout, clients, 0, student=True)
    return clients


def federated_run(
    cfg: ExperimentConfig,
    layout: Layout,
    jobs: int = 1,
    profiles: Sequence[StyleProfile] | None = None,
    n_iter: int | None = None,
    stop_on_plateau: bool | None = None,
    requesters: Sequence[str] | None = None,
    sources: Sequence[str] | None = None,
    records_name: str = "rounds.csv",
    clients: dict | None = None,
) -> tuple[FusionSession, dict]:
    """Pretrain every client, then run up to ``cfg.rounds`` federated rounds."""
    if clients is None:
        clients = build_clients(cfg, layout, profiles)
        pretrain(clients, train_config(cfg), cfg.pretrain_epochs, jobs)
    save_models(layout, clients, 0)
    ids = list(clients)
    session = open_fusion_session(
        ids,
        requesters=list(requesters) if requesters else ids,
        sources=list(sources) if sources else ids,
        strategy=cfg.strategy,
        max_rounds=cfg.rounds,
        mu=cfg.mu if cfg.strategy == "fedprox" else 0.0,
        tol=cfg.plateau_tol,
        window=cfg.plateau_window,
    )
    tcfg = train_config(cfg, n_iter)
    stop = cfg.stop_on_plateau if stop_on_plateau is None else stop_on_plateau
    while session.t < session.max_rounds:
        record = run_round(session, clients, tcfg, cfg.link, jobs)
        if record.failed:
            raise RuntimeError(f"round {record.round} failed; see log")
        if stop and satisfaction_check(session) == "converged":
            break
    emit_report(session.records, layout.records / records_name, svg=False)
    if session.t:
        save_models(layout, {c: clients[c] for c in session.participants}, session.t)
    return session, clients


def cross_style_distance(requester: ClientState, source: ClientState) -> float:
    """Mean paired perceptual distance from the requester's sketches of the source's images to the source's sketches."""
    generated = requester.generate_array(images=source.images)
    return float(perceptual_distance(requester.encoder, generated, source.sketches).mean())


def fuse(cfg: ExperimentConfig, layout: Layout, jobs: int = 1) -> tuple[FusionSession, list[dict]]:
    clients = build_clients(cfg, layout)
    pretrain(clients, train_config(cfg), cfg.pretrain_epochs, jobs)
    sources = cfg.fusion.sources or list(clients)
    requesters = cfg.fusion.requesters or list(clients)
    before = {(r, s): cross_style_distance(clients[r], clients[s]) for r in requesters for s in sources if r != s}
    session, _ = federated_run(
        cfg, layout, jobs, stop_on_plateau=True, requesters=requesters, sources=sources,
        records_name="fusion.csv", clients=clients,
    )
    rows = [
        {"requester": r, "source": s, "distance_before": b, "distance_after": cross_style_distance(clients[r], clients[s])}
        for (r, s), b in before.items()
    ]
    _write_rows(layout.records / "fusion_effect.csv", ["requester", "source", "distance_before", "distance_after"], rows)
    return session, rows


def report(layout: Layout) -> Path:
    """Concatenate every round CSV under the output directory into ``report/report.csv`` (+ SVG)."""
    rows = []
    for path in sorted(layout.root.rglob("*.csv")):
        if path.parent.name != "records" or path.name not in ("rounds.csv", "fusion.csv"):
            continue
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    out = layout.report / "report.csv"
    emit_report(rows, out)
    return out


def sweep_niter(cfg: ExperimentConfig, layout: Layout, jobs: int = 1) -> list[dict]:
    rows = []
    for n in cfg.sweep_niter:
        sub = Layout(layout.root / f"niter_{n}").make()
        write_manifest(sub, "sweep-niter", replace(cfg, n_iter=n, stop_on_plateau=True))
        session, _ = federated_run(cfg, sub, jobs, n_iter=n, stop_on_plateau=True)
        rows.append(
            {
                "n_iter": n,
                "rounds_to_plateau": session.t,
                "final_proxy_fid": session.history[-1] if session.history else float("nan"),
            }
        )
    _write_rows(layout.records / "sweep_niter.csv", ["n_iter", "rounds_to_plateau", "final_proxy_fid"], rows)
    return rows


def sweep_clients(cfg: ExperimentConfig, layout: Layout, jobs: int = 1) -> list[dict]:
    rows = []
    for k in cfg.sweep_clients:
        sub = Layout(layout.root / f"clients_{k}").make()
        profiles = sweep_profiles(cfg.clients, k)
        write_manifest(sub, "sweep-clients", replace(cfg, clients=profiles))
        session, clients = federated_run(cfg, sub, jobs, profiles=profiles)
        per_client = client_upload(next(iter(clients.values())), cfg.strategy).scalar_count()
        last = session.records[-1] if session.records else None
        rows.append(
            {
                "client_count": k,
                "rounds": session.t,
                "bytes_up_per_round": last.bytes_up if last else 0,
                "aggregated_params_per_round": aggregated_param_count(per_client, k),
                "final_proxy_fid": session.history[-1] if session.history else float("nan"),
            }
        )
    header = ["client_count", "rounds", "bytes_up_per_round", "aggregated_params_per_round", "final_proxy_fid"]
    _write_rows(layout.records / "sweep_clients.csv", header, rows)
    return rows
