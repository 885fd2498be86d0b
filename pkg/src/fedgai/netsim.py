"""Deterministic cloud-edge link accounting: bytes on the wire and round latency."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from .params import ParamSet, encoded_size

MEBIBYTE = 1 << 20


@dataclass(frozen=True)
class LinkModel:
    bandwidth_bits_per_s: float = 1_000_000.0
    per_message_overhead_bytes: int = 64
    server_aggregate_seconds_per_mparam: float = 0.01
    parallel_uplink: bool = False

    def __post_init__(self):
        if self.bandwidth_bits_per_s <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.per_message_overhead_bytes < 0 or self.server_aggregate_seconds_per_mparam < 0:
            raise ValueError("overhead and aggregate cost must be >= 0")


@dataclass
class RoundRecord:
    round: int
    client_count: int
    strategy: str
    n_iter: int
    bytes_up: int = 0
    bytes_down: int = 0
    upload_s: float = 0.0
    aggregate_s: float = 0.0
    download_s: float = 0.0
    mean_proxy_fid: float = float("nan")
    mean_lpips_proxy: float = float("nan")
    wall_time_total: float = 0.0
    failed: bool = False
    # measured local training time; kept out of the deterministic CSV
    local_compute_s: float = 0.0

    def as_row(self) -> dict:
        return asdict(self)


def message_bytes(p: ParamSet, overhead_bytes: int = 64) -> int:
    """Encoded size of ``p`` on the wire plus the per-message overhead."""
    return encoded_size(p) + overhead_bytes


def aggregated_param_count(per_client_params: int, n_clients: int) -> int:
    if per_client_params < 0 or n_clients < 0:
        raise ValueError("counts must be >= 0")
    return int(per_client_params) * int(n_clients)


def transfer_seconds(link: LinkModel, sizes: Sequence[int]) -> float:
    bits = [8.0 * s / link.bandwidth_bits_per_s for s in sizes]
    if not bits:
        return 0.0
    return max(bits) if link.parallel_uplink else sum(bits)


def round_latency(
    link: LinkModel,
    uploads: Sequence[int],
    broadcast: Sequence[int],
    aggregated_scalars: int = 0,
) -> tuple[float, float, float]:
    """``(upload_s, aggregate_s, download_s)`` for message sizes in bytes.

    Transfers share one link and are serialised unless ``parallel_uplink``;
    aggregation cost is linear in the number of scalars averaged.
    """
    upload_s = transfer_seconds(link, uploads)
    aggregate_s = link.server_aggregate_seconds_per_mparam * aggregated_scalars / 1e6
    download_s = transfer_seconds(link, broadcast)
    return upload_s, aggregate_s, download_s
