"""Federated averaging: broadcast, local epochs per owner, sample-weighted
aggregation; plus the centralized and local-only baselines trained with the
same loop so the three models are directly comparable."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import optim
from .data import ApplianceThreshold, WindowedDataset
from .errors import ConfigError, DataError, DimensionError, SpecHashMismatch, TrainingAborted
from .metrics import MetricReport, evaluate_model
from .model import ArchitectureSpec, Batch, ParameterVector, backward, check_params, init_params, save_checkpoint
from .optim import OptimizerHyper, OptimizerState, lr_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    arch: ArchitectureSpec
    K: int = 4
    R: int = 20
    E: int = 2
    batch_size: int = 64
    seed: int = 0
    optimizer: str = optim.ADAM
    hyper: OptimizerHyper = field(default_factory=OptimizerHyper)
    eval_every: int = 5
    reset_optimizer_each_round: bool = False
    workers: int = 1
    threshold: Optional[ApplianceThreshold] = None  # needed only for evaluation
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("K", "R", "E", "batch_size", "eval_every", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.optimizer not in (optim.SGD, optim.ADAM):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ClientState:
    client_id: int
    dataset: WindowedDataset
    optimizer_state: OptimizerState
    params: Optional[ParameterVector] = None
    epochs_done: int = 0

    @property
    def n_k(self) -> int:
        return self.dataset.N


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ParameterVector
    n_k: int
    mean_train_loss: float = float("nan")


@dataclass
class RoundRecord:
    round: int
    lr: float
    per_client: list  # of {"client_id", "n_k", "mean_train_loss"}
    global_params_digest: int
    eval: Optional[MetricReport] = None
    wall_ms: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0

    @property
    def n(self) -> int:
        return sum(c["n_k"] for c in self.per_client)

    @property
    def train_loss(self) -> float:
        """Sample-weighted mean of the clients' round losses."""
        n = self.n
        return sum(c["n_k"] * c["mean_train_loss"] for c in self.per_client) / n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"] = None if self.eval is None else self.eval.to_dict()
        d["train_loss"] = self.train_loss
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        d = dict(d)
        d.pop("train_loss", None)
        d.pop("kind", None)
        if d.get("eval") is not None:
            d["eval"] = MetricReport.from_dict(d["eval"])
        return cls(**d)


def params_digest(params: ParameterVector) -> int:
    """64-bit digest of the spec hash and the little-endian parameter bytes."""
    h = hashlib.blake2b(digest_size=8)
    h.update(params.spec_hash.to_bytes(8, "little"))
    h.update(np.ascontiguousarray(params.values).astype(params.values.dtype.newbyteorder("<")).tobytes())
    return int.from_bytes(h.digest(), "little")


def batch_rng(seed: int, client_id: int, round: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, client_id, round]))


def make_client(client_id: int, dataset: WindowedDataset, cfg: FederationConfig) -> ClientState:
    if dataset.N == 0:
        raise DataError(f"client {client_id} has an empty dataset")
    state = OptimizerState.fresh(cfg.optimizer, cfg.hyper, cfg.arch.param_count, cfg.np_dtype)
    return ClientState(client_id, dataset, state)


def local_update(
    client: ClientState,
    global_params: ParameterVector,
    E: int,
    round: int,
    cfg: FederationConfig,
    lr: float | None = None,
) -> tuple[ClientState, float]:
    """Run E epochs of mini-batch training starting from ``global_params``.

    Batch order comes from ``(cfg.seed, client_id, round)`` so the result is a
    pure function of the inputs.  When one batch covers the whole dataset the
    rows are used in stored order.
    """
    spec = cfg.arch
    check_params(spec, global_params)
    if E < 1:
        raise ConfigError("E must be >= 1")
    ds = client.dataset
    n = ds.N
    if n == 0:
        raise DataError(f"client {client.client_id} has an empty dataset")
    lr = lr_schedule(round, cfg.hyper) if lr is None else lr
    state = client.optimizer_state.reset() if cfg.reset_optimizer_each_round else client.optimizer_state
    targets = ds.targets(spec.head_mode)
    rng = batch_rng(cfg.seed, client.client_id, round)
    bs = cfg.batch_size

    params = global_params
    losses = []
    for _ in range(E):
        order = None if bs >= n else rng.permutation(n)
        for start in range(0, n, bs):
            if order is None:
                x, t = ds.inputs, targets
            else:
                idx = order[start : start + bs]
                x, t = ds.inputs[idx], targets[idx]
            value, grad = backward(spec, params, Batch(x, t))
            state, params = optim.step(state, params, grad, lr)
            losses.append(value)
    new = replace(client, params=params, optimizer_state=state, epochs_done=client.epochs_done + E)
    return new, float(np.mean(losses))


def _sorted_updates(updates: Iterable) -> list[ClientUpdate]:
    out = []
    for i, u in enumerate(updates):
        if isinstance(u, ClientUpdate):
            out.append(u)
        else:
            p, n_k = u
            out.append(ClientUpdate(i, p, n_k))
    ids = [u.client_id for u in out]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids in aggregation: {ids}")
    return sorted(out, key=lambda u: u.client_id)


def aggregate(updates: Sequence) -> ParameterVector:
    """Sample-count weighted average ``sum_k (n_k / n) * w_k``.

    Accepts ClientUpdate objects or ``(params, n_k)`` pairs (whose list
    position then stands in for the client id).  Terms are summed in ascending
    client id order in float64 and rounded once to the storage dtype.
    """
    ups = _sorted_updates(updates)
    if not ups:
        raise ConfigError("no updates to aggregate")
    first = ups[0].params
    for u in ups:
        if u.params.spec_hash != first.spec_hash:
            raise SpecHashMismatch(f"client {u.client_id} sent parameters for a different architecture")
        if u.params.count != first.count:
            raise DimensionError(f"client {u.client_id} sent {u.params.count} parameters, expected {first.count}")
        if u.n_k < 1:
            raise ConfigError(f"client {u.client_id} reported n_k={u.n_k}")
    n = sum(u.n_k for u in ups)
    acc = np.zeros(first.count, dtype=np.float64)
    for u in ups:
        acc += (u.n_k / n) * u.params.values.astype(np.float64)
    return ParameterVector(acc.astype(first.dtype), first.spec_hash)


def run_round(
    global_params: ParameterVector,
    clients: list[ClientState],
    round: int,
    cfg: FederationConfig,
    pool: ThreadPoolExecutor | None = None,
) -> tuple[ParameterVector, RoundRecord, list[ClientState]]:
    """Broadcast, train every client, then aggregate (a barrier).

    Returns the new global parameters, the round record and the updated client
    states.  Any client failure aborts the whole round.
    """
    t0 = time.perf_counter()
    lr = lr_schedule(round, cfg.hyper)

    def work(c):
        return local_update(c, global_params, cfg.E, round, cfg, lr)

    try:
        results = list(pool.map(work, clients)) if pool is not None else [work(c) for c in clients]
    except Exception as exc:
        raise TrainingAborted(f"round {round} aborted: {exc}") from exc

    new_clients = [r[0] for r in results]
    updates = [ClientUpdate(c.client_id, c.params, c.n_k, loss) for c, loss in results]
    new_global = aggregate(updates)
    record = RoundRecord(
        round=round,
        lr=lr,
        per_client=[
            {"client_id": u.client_id, "n_k": u.n_k, "mean_train_loss": u.mean_train_loss}
            for u in sorted(updates, key=lambda u: u.client_id)
        ],
        global_params_digest=params_digest(new_global),
        wall_ms=int(1000 * (time.perf_counter() - t0)),
    )
    return new_global, record, new_clients


def _should_eval(round: int, cfg: FederationConfig) -> bool:
    return (round + 1) % cfg.eval_every == 0 or round == cfg.R - 1


def _evaluate(cfg, params, eval_set):
    if eval_set is None or cfg.threshold is None:
        return None
    return evaluate_model(cfg.arch, params, eval_set, cfg.threshold)


def run_federation(
    cfg: FederationConfig,
    clients: list[ClientState],
    eval_set: WindowedDataset | None = None,
    init: ParameterVector | None = None,
    log_path=None,
    checkpoint_path=None,
) -> tuple[ParameterVector, list[RoundRecord]]:
    """R rounds of federated averaging; the only stopping rule is the round count."""
    if not clients:
        raise ConfigError("federation needs at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids: {ids}")
    if len(clients) != cfg.K:
        raise ConfigError(f"config expects K={cfg.K} clients, got {len(clients)}")
    params = init if init is not None else init_params(cfg.arch, cfg.seed, cfg.np_dtype)
    check_params(cfg.arch, params)
    records = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(cfg.R):
            params, rec, clients = run_round(params, clients, r, cfg, pool)
            if _should_eval(r, cfg):
                rec.eval = _evaluate(cfg, params, eval_set)
            records.append(rec)
            log.info("round %d lr=%.3g loss=%.5f", r, rec.lr, rec.train_loss)
            if log_path is not None:
                append_jsonl(log_path, {"kind": "round", **rec.to_dict()})
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, cfg.arch, params)
    return params, records


def train_central(
    cfg: FederationConfig,
    full_dataset: WindowedDataset,
    eval_set: WindowedDataset | None = None,
    init: ParameterVector | None = None,
    client_id: int = 0,
) -> tuple[ParameterVector, list[RoundRecord]]:
    """Single-site training for R virtual rounds of E epochs each.

    Uses exactly the federated loop with one participant, so the schedule,
    batch seeding and total epoch budget (R * E) all match.
    """
    client = make_client(client_id, full_dataset, cfg)
    return run_federation(replace(cfg, K=1, workers=1), [client], eval_set, init)


def train_local_baselines(
    cfg: FederationConfig,
    clients: list[ClientState],
    eval_set: WindowedDataset | None = None,
    init: ParameterVector | None = None,
) -> list[tuple[int, ParameterVector, Optional[MetricReport]]]:
    """Train every owner alone with the same budget and score each on the shared test set."""
    out = []
    for c in clients:
        if c.n_k == 0:
            raise DataError(f"client {c.client_id} has an empty dataset")
        params, _ = train_central(cfg, c.dataset, None, init, client_id=c.client_id)
        out.append((c.client_id, params, _evaluate(cfg, params, eval_set)))
    return out


def append_jsonl(path, obj: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True) + "\n")
