"""In-process federated simulation over adapter parameters.

Each :class:`ClientState` owns its training and test records. The only thing a
client hands back to the server is a :class:`ClientUpdate` (adapters and a
sample count) plus scalar diagnostics; the records themselves stay behind the
client's methods.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .adapter import (
    AdapterModel,
    AdapterSet,
    BaseModel,
    TrainConfig,
    dataset_from_records,
    merge_adapters,
    train_adapters,
)
from .errors import CheckpointMismatchError, DivergenceError, ShapeMismatchError, ZeroSamplesError

DEFAULT_BASE_SEED = 3407


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 2
    local_steps: int = 200
    base_seed: int = DEFAULT_BASE_SEED
    client_seeds: tuple | None = None
    train: TrainConfig = TrainConfig()
    concurrent: bool = False
    max_workers: int = 4
    bytes_per_scalar: int = 4

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")

    def seed_for(self, index: int) -> int:
        if self.client_seeds is not None:
            return int(self.client_seeds[index])
        return self.base_seed + index

    def local_train_config(self) -> TrainConfig:
        return replace(self.train, total_steps=self.local_steps,
                       warmup_steps=min(self.train.warmup_steps, self.local_steps))


@dataclass(frozen=True)
class ClientUpdate:
    """Everything the server sees from a client after local training."""

    adapters: AdapterSet
    n_k: int


@dataclass
class LocalResult:
    update: ClientUpdate
    losses: list


class ClientState:
    def __init__(self, client_id: int, corridor: str, records: Sequence[dict], base: BaseModel,
                 adapters: AdapterSet, seed: int, test_records: Sequence[dict] = ()):
        self.client_id = client_id
        self.corridor = corridor
        self.seed = seed
        self._records = list(records)
        self._dataset = dataset_from_records(self._records)
        self._test_records = list(test_records)
        self._base = base
        self.adapters = adapters.copy()

    @property
    def n_k(self) -> int:
        return len(self._dataset)

    @property
    def n_test(self) -> int:
        return len(self._test_records)

    def fit(self, global_adapters: AdapterSet, cfg: TrainConfig, round_idx: int) -> LocalResult:
        """Overwrite local adapters with the broadcast set, train locally, return the update."""
        self.adapters = global_adapters.copy()
        model = AdapterModel(self._base, self.adapters)
        try:
            _, losses = train_adapters(model, self._dataset, cfg, seed=[self.seed, round_idx])
        except DivergenceError as exc:
            raise DivergenceError(exc.step, exc.loss, client_id=self.client_id) from exc
        return LocalResult(ClientUpdate(self.adapters.copy(), self.n_k), losses)

    def evaluate(self, adapters: AdapterSet):
        """Evaluate a global adapter set on the client's held-out records."""
        from .evalkit import evaluate

        return evaluate(AdapterModel(self._base, adapters), self._test_records)


@dataclass
class RoundReport:
    round_idx: int
    client_ids: list
    losses: dict  # client_id -> per-step losses
    sample_counts: dict
    bytes_up: int
    bytes_down: int
    global_checksum: str
    metrics: dict = field(default_factory=dict)  # client_id -> overall MetricSet as dict

    @property
    def bytes_total(self) -> int:
        return self.bytes_up + self.bytes_down

    def to_dict(self) -> dict:
        return {
            "round": self.round_idx,
            "clients": [
                {
                    "client_id": cid,
                    "n_k": self.sample_counts[cid],
                    "final_loss": self.losses[cid][-1] if self.losses[cid] else None,
                    "losses": self.losses[cid],
                    **({"metrics": self.metrics[cid]} if cid in self.metrics else {}),
                }
                for cid in self.client_ids
            ],
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "global_checksum": self.global_checksum,
        }


def init_clients(client_datasets: Sequence, checkpoint: AdapterModel, cfg: FedConfig = FedConfig()):
    """``client_datasets`` items are ``(corridor, train_records)`` or ``(corridor, train, test)``."""
    if not isinstance(checkpoint, AdapterModel):
        raise CheckpointMismatchError("federation needs a checkpoint with adapters attached")
    if not checkpoint.base.frozen:
        raise CheckpointMismatchError("checkpoint base parameters are not frozen")
    if len(client_datasets) == 0:
        raise ValueError("at least one client is required")
    clients = []
    for i, item in enumerate(client_datasets):
        corridor, train = item[0], item[1]
        test = item[2] if len(item) > 2 else ()
        clients.append(ClientState(i, corridor, train, checkpoint.base, checkpoint.adapters, cfg.seed_for(i), test))
    return clients


def fedavg(updates: Sequence, client_ids: Sequence[int] | None = None) -> AdapterSet:
    """Sample-weighted elementwise mean of adapter sets.

    ``updates`` holds ``ClientUpdate`` or ``(AdapterSet, n_k)`` pairs. When
    client ids are given, summation follows ascending id so the result does
    not depend on arrival order. The mean is accumulated as offsets from the
    first set, which keeps identical inputs exactly fixed.
    """
    pairs = [(u.adapters, u.n_k) if isinstance(u, ClientUpdate) else (u[0], u[1]) for u in updates]
    if not pairs:
        raise ValueError("fedavg needs at least one update")
    if client_ids is not None:
        if len(client_ids) != len(pairs):
            raise ValueError("client_ids length does not match updates")
        pairs = [p for _, p in sorted(zip(client_ids, pairs), key=lambda t: t[0])]
    ref = pairs[0][0]
    for ad, n in pairs:
        if not ad.same_shape(ref):
            raise ShapeMismatchError("client adapter shapes differ")
        if n <= 0:
            raise ZeroSamplesError(f"client sample count must be positive, got {n}")
    total = float(sum(n for _, n in pairs))
    if total <= 0:
        raise ZeroSamplesError("zero total samples")
    weights = [n / total for _, n in pairs]
    ref_arrays = ref.arrays()
    out = []
    for j, anchor in enumerate(ref_arrays):
        acc = anchor.copy()
        for (ad, _), w in zip(pairs[1:], weights[1:]):
            acc += w * (ad.arrays()[j] - anchor)
        out.append(acc)
    return AdapterSet(tuple(ref.layers), out[0::2], out[1::2], ref.rank, ref.alpha)


def comm_cost(adapters: AdapterSet, base: BaseModel, bytes_per_scalar: int = 4):
    """(adapter_bytes, full_bytes, ratio) for one transfer of the adapter set."""
    a = adapters.n_params * bytes_per_scalar
    full = (base.n_params + adapters.n_params) * bytes_per_scalar
    return a, full, a / full


# Reference figures for the full-scale setting; documentation only.
REFERENCE_ADAPTER_MB = 70.5
REFERENCE_FULL_GB = 2.9
REFERENCE_TRAINABLE_PCT = 1.18


def run_round(clients: Sequence[ClientState], global_adapters: AdapterSet, cfg: FedConfig, round_idx: int):
    """One broadcast, local-train, aggregate cycle. Returns (new global adapters, report)."""
    local_cfg = cfg.local_train_config()

    def work(client):
        return client.fit(global_adapters, local_cfg, round_idx)

    if cfg.concurrent and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    ids = [c.client_id for c in clients]
    new_global = fedavg([r.update for r in results], client_ids=ids)
    per_client = global_adapters.n_params * cfg.bytes_per_scalar
    report = RoundReport(
        round_idx=round_idx,
        client_ids=sorted(ids),
        losses={c.client_id: r.losses for c, r in zip(clients, results)},
        sample_counts={c.client_id: r.update.n_k for c, r in zip(clients, results)},
        bytes_up=per_client * len(clients),
        bytes_down=per_client * len(clients),
        global_checksum=new_global.checksum(),
    )
    return new_global, report


def run_federation(client_datasets: Sequence, checkpoint: AdapterModel, cfg: FedConfig = FedConfig(),
                   evaluate_each_round: bool = True):
    """Run ``cfg.rounds`` rounds from the checkpoint adapters.

    Returns (merged BaseModel, round reports, per-round metrics). Per-round
    metrics map client id to that client's held-out EvalReport for the global
    adapters, plus a ``"global"`` sample-weighted MetricSet.
    """
    from .evalkit import global_weighted

    clients = init_clients(client_datasets, checkpoint, cfg)
    global_adapters = checkpoint.adapters.copy()
    reports, per_round = [], []
    for r in range(cfg.rounds):
        global_adapters, report = run_round(clients, global_adapters, cfg, r)
        if evaluate_each_round and all(c.n_test > 0 for c in clients):
            client_reports = {c.client_id: c.evaluate(global_adapters) for c in clients}
            report.metrics = {cid: rep.overall.to_dict() for cid, rep in client_reports.items()}
            glob = global_weighted([(rep.overall, rep.overall.n) for rep in client_reports.values()])
            per_round.append({"clients": client_reports, "global": glob})
        reports.append(report)
    final = AdapterModel(checkpoint.base, global_adapters)
    return merge_adapters(final), reports, per_round


def write_round_reports(reports: Sequence[RoundReport], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rep in reports:
        p = out_dir / f"round_{rep.round_idx:02d}.json"
        p.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
        paths.append(p)
    return paths
