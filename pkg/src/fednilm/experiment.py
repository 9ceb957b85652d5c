"""Run configuration, scenario presets, dataset preparation and run manifests."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .data import (
    ApplianceThreshold,
    CsvSchema,
    LoadSeries,
    SynthConfig,
    WindowedDataset,
    align_and_resample,
    concat_datasets,
    ingest_csv,
    load_dataset,
    make_windows,
    normalize_fit,
    partition_owners,
    save_dataset,
    synth_generate,
)
from .errors import ConfigError, DataError
from .fedavg import (
    FederationConfig,
    RoundRecord,
    make_client,
    params_digest,
    run_federation,
    train_central,
    train_local_baselines,
)
from .metrics import MetricReport, evaluate_model
from .model import (
    CLASSIFICATION,
    REGRESSION,
    ArchitectureSpec,
    default_architecture,
    save_checkpoint,
    small_architecture,
)
from .optim import OptimizerHyper

log = logging.getLogger(__name__)

OUTPUT_ENV = "FEDNILM_OUTPUT_DIR"

MODES = {"regression": REGRESSION, "classification": CLASSIFICATION}

RESIDENTIAL_APPLIANCES = ("dishwasher", "kettle", "microwave", "tumble dryer", "washing machine", "television")
INDUSTRIAL_APPLIANCES = ("pelletizer", "double-pole contactor", "exhaust fan", "milling machine")

SYNTH_SMALL_APPLIANCES = (
    {"name": "microwave", "on_power": 600.0, "duty_cycle": 0.1, "cycle_len": 150},
    {"name": "washing machine", "on_power": 1800.0, "duty_cycle": 0.5, "cycle_len": 9000},
)

PRESETS: dict[str, dict] = {
    "residential": {
        "W": 599,
        "K": 4,
        "R": 100,
        "E": 10,
        "batch_size": 512,
        "samples_per_owner": 162_000,
        "test_samples": 1_296_000,
        "appliance": "dishwasher",
        "arch": "default",
        "data": {"source": "csv", "period_s": 8.0},
    },
    "industrial": {
        "W": 599,
        "K": 8,
        "R": 100,
        "E": 10,
        "batch_size": 512,
        "samples_per_owner": 5_400,
        "test_samples": 43_200,
        "appliance": "pelletizer",
        "arch": "default",
        "data": {"source": "csv", "period_s": 16.0},
    },
    "synthetic-small": {
        "W": 63,
        "K": 4,
        "R": 20,
        "E": 2,
        "batch_size": 64,
        "samples_per_owner": 4_000,
        "test_samples": 8_000,
        "appliance": "microwave",
        "arch": "small",
        # 20 rounds is a short budget: a constant rate and a noisy base load
        # let every trainer reach the noise floor inside it
        "optimizer": {"kind": "adam", "lr0": 0.003, "decay_gamma": 1.0},
        "data": {
            "source": "synthetic",
            "period_s": 8.0,
            "appliances": [dict(a) for a in SYNTH_SMALL_APPLIANCES],
            "noise_std": 1500.0,
        },
    },
}

_DATA_KEYS = {
    "source",
    "period_s",
    # synthetic
    "appliances",
    "noise_std",
    # csv
    "path",
    "timestamp_column",
    "aggregate_column",
    "appliance_column",
    "max_gap_s",
    # cached
    "dir",
}


@dataclass
class RunConfig:
    scenario: str = "synthetic-small"
    data: dict = field(default_factory=dict)
    appliance: str = "microwave"
    threshold_w: Optional[float] = None
    W: int = 63
    K: int = 4
    samples_per_owner: int = 4000
    test_samples: int = 8000
    R: int = 20
    E: int = 2
    batch_size: int = 64
    optimizer: dict = field(default_factory=lambda: {"kind": "adam"})
    reset_optimizer_each_round: bool = False
    seed: int = 0
    mode: str = "regression"
    arch: Any = "small"
    eval_every: int = 5
    workers: int = 1
    output_dir: str = "runs/default"

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        scenario = d.get("scenario", "synthetic-small")
        base = copy.deepcopy(PRESETS.get(scenario, {}))
        if "data" in d and "data" in base and d["data"].get("source", base["data"]["source"]) != base["data"]["source"]:
            base["data"] = {}
        merged = {**base, **{k: v for k, v in d.items() if k != "data"}}
        merged["data"] = {**base.get("data", {}), **d.get("data", {})}
        merged["scenario"] = scenario
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(apply_overrides(raw, overrides or {}))

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        for name in ("W", "K", "samples_per_owner", "test_samples", "R", "E", "batch_size", "eval_every", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.W % 2 == 0:
            raise ConfigError(f"W must be odd, got {self.W}")
        unknown = set(self.data) - _DATA_KEYS
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        src = self.data.get("source")
        if src not in ("synthetic", "csv", "cached"):
            raise ConfigError(f"data.source must be synthetic, csv or cached, got {src!r}")
        if src == "csv":
            for key in ("path", "timestamp_column", "aggregate_column", "appliance_column"):
                if key not in self.data:
                    raise ConfigError(f"data.{key} is required for csv input")
            if not Path(self.data["path"]).exists():
                raise ConfigError(f"data.path {self.data['path']} does not exist")
        if src == "cached" and not (Path(self.data.get("dir", "")) / "data.json").exists():
            raise ConfigError(f"data.dir {self.data.get('dir')!r} holds no prepared datasets")
        if src == "synthetic":
            names = [a["name"] for a in self.data.get("appliances", [])]
            if self.appliance not in names:
                raise ConfigError(f"appliance {self.appliance!r} is not among synthetic appliances {names}")
        known_opt = {"kind", "lr0", "beta1", "beta2", "eps_stab", "decay_gamma"}
        if set(self.optimizer) - known_opt:
            raise ConfigError(f"unknown optimizer keys: {sorted(set(self.optimizer) - known_opt)}")
        if self.threshold_w is not None and not self.threshold_w > 0:
            raise ConfigError("threshold_w must be positive")
        self.hyper()  # raises on bad values
        self.architecture()
        self.threshold()

    # -- derived objects -------------------------------------------------------

    @property
    def head_mode(self) -> str:
        return MODES[self.mode]

    def hyper(self) -> OptimizerHyper:
        return OptimizerHyper(**{k: v for k, v in self.optimizer.items() if k != "kind"})

    def architecture(self) -> ArchitectureSpec:
        if self.arch == "default":
            return default_architecture(self.W, self.head_mode)
        if self.arch == "small":
            return small_architecture(self.W, self.head_mode)
        if isinstance(self.arch, dict):
            spec = ArchitectureSpec.from_dict({"window_len": self.W, "head_mode": self.head_mode, **self.arch})
            if spec.window_len != self.W or spec.head_mode != self.head_mode:
                raise ConfigError("explicit architecture disagrees with W or mode")
            return spec
        raise ConfigError(f"arch must be 'default', 'small' or a layer description, got {self.arch!r}")

    def threshold(self) -> ApplianceThreshold:
        if self.threshold_w is not None:
            return ApplianceThreshold(self.appliance, float(self.threshold_w))
        try:
            return ApplianceThreshold.lookup(self.appliance)
        except DataError:
            raise ConfigError(f"no tabulated threshold for {self.appliance!r}; set threshold_w") from None

    def federation(self) -> FederationConfig:
        return FederationConfig(
            arch=self.architecture(),
            K=self.K,
            R=self.R,
            E=self.E,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer.get("kind", "adam"),
            hyper=self.hyper(),
            eval_every=self.eval_every,
            reset_optimizer_each_round=self.reset_optimizer_each_round,
            workers=self.workers,
            threshold=self.threshold(),
        )

    def out_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Apply ``{"a.b": value}`` overrides; string values are parsed as JSON when possible."""
    out = copy.deepcopy(raw)
    for key, value in overrides.items():
        if isinstance(value, str):
            value = _coerce(value)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not an object")
        node[parts[-1]] = value
    return out


# --- datasets ---------------------------------------------------------------------


@dataclass
class Prepared:
    owners: list
    test: WindowedDataset
    info: dict


def dataset_digest(ds: WindowedDataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.inputs, ds.target_power, ds.target_power_norm, ds.target_on):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps([ds.stats.mean, ds.stats.std, ds.target_stats.mean, ds.target_stats.std]).encode())
    return h.hexdigest()[:16]


def _split_and_window(cfg: RunConfig, total: LoadSeries, target: LoadSeries, info: dict) -> Prepared:
    W = cfg.W
    n_train = cfg.K * cfg.samples_per_owner + W - 1
    n_test = cfg.test_samples + W - 1
    if len(total) < n_train + n_test:
        raise DataError(
            f"need {n_train + n_test} aligned samples for {cfg.K} owners x {cfg.samples_per_owner} "
            f"plus {cfg.test_samples} test windows, have {len(total)}"
        )
    tr_tot, tr_app = total.slice(0, n_train), target.slice(0, n_train)
    # test span is the tail of the series, after the training span
    te_tot = total.slice(len(total) - n_test, len(total))
    te_app = target.slice(len(total) - n_test, len(total))
    stats = normalize_fit(tr_tot.values)
    tstats = normalize_fit(tr_app.values)
    thr = cfg.threshold()
    train = make_windows(tr_tot, tr_app, W, thr, stats, tstats)
    owners = partition_owners(train, cfg.K, cfg.samples_per_owner)
    test = make_windows(te_tot, te_app, W, thr, stats, tstats)
    info = {
        **info,
        "W": W,
        "K": cfg.K,
        "samples_per_owner": cfg.samples_per_owner,
        "n_test": test.N,
        "threshold_w": thr.watts,
        "stats": {"mean": stats.mean, "std": stats.std},
        "target_stats": {"mean": tstats.mean, "std": tstats.std},
    }
    return Prepared(owners, test, info)


def synth_config(cfg: RunConfig) -> SynthConfig:
    n = cfg.K * cfg.samples_per_owner + cfg.test_samples + 2 * (cfg.W - 1)
    return SynthConfig(
        n_samples=n,
        appliances=tuple(cfg.data.get("appliances", ())),
        period_s=float(cfg.data.get("period_s", 8.0)),
        noise_std=float(cfg.data.get("noise_std", 0.0)),
        seed=cfg.seed,
    )


def prepare_datasets(cfg: RunConfig) -> Prepared:
    src = cfg.data["source"]
    if src == "cached":
        return load_prepared(cfg.data["dir"])
    if src == "synthetic":
        total, apps = synth_generate(synth_config(cfg))
        target = next(a for a in apps if a.appliance == cfg.appliance)
        return _split_and_window(cfg, total, target, {"source": "synthetic"})
    schema = CsvSchema(
        timestamp=cfg.data["timestamp_column"],
        aggregate=cfg.data["aggregate_column"],
        appliances={cfg.data["appliance_column"]: cfg.appliance},
    )
    total_raw, app_raw = ingest_csv(cfg.data["path"], schema)
    period = float(cfg.data.get("period_s") or total_raw.period_s)
    aligned = align_and_resample(total_raw, app_raw, period, float(cfg.data.get("max_gap_s", 30.0)))
    info = {"source": "csv", "path": str(cfg.data["path"]), "truncated_at_s": aligned.truncated_at_s,
            "dropped_s": aligned.dropped_s, "aligned_samples": len(aligned.total)}
    return _split_and_window(cfg, aligned.total, aligned.appliance, info)


def save_prepared(prep: Prepared, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for k, ds in enumerate(prep.owners):
        save_dataset(d / f"owner_{k:02d}.fnds", ds)
        files.append(f"owner_{k:02d}.fnds")
    save_dataset(d / "test.fnds", prep.test)
    info = {
        **prep.info,
        "owners": files,
        "test": "test.fnds",
        "digests": {"owners": [dataset_digest(o) for o in prep.owners], "test": dataset_digest(prep.test)},
        "owner_windows": [o.N for o in prep.owners],
    }
    (d / "data.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return info


def load_prepared(directory) -> Prepared:
    d = Path(directory)
    try:
        info = json.loads((d / "data.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{d}: no data.json") from None
    owners = [load_dataset(d / f) for f in info["owners"]]
    return Prepared(owners, load_dataset(d / info["test"]), info)


# --- runs and manifests -------------------------------------------------------------


def _round_line(rec: RoundRecord) -> dict:
    d = rec.to_dict()
    d.pop("wall_ms")  # timings live in the timing block only
    return {"kind": "round", **d}


class ManifestWriter:
    """One run directory: config.json, manifest.jsonl, checkpoints/, plots/."""

    def __init__(self, out_dir, run_kind: str, cfg: RunConfig):
        self.dir = Path(out_dir)
        (self.dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.dir / "plots").mkdir(parents=True, exist_ok=True)
        self.path = self.dir / "manifest.jsonl"
        self.path.write_text("", encoding="utf-8")
        (self.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        self.run_kind = run_kind
        self.t0 = time.time()
        self.wall_ms: list[int] = []
        self.write({"kind": "config", "run_kind": run_kind, "tool_version": __version__, "config": cfg.to_dict()})

    def write(self, obj: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")

    def rounds(self, records) -> None:
        for rec in records:
            self.wall_ms.append(rec.wall_ms)
            self.write(_round_line(rec))

    def close(self) -> None:
        self.write({"kind": "timing", "started_unix": self.t0, "elapsed_s": time.time() - self.t0,
                    "round_wall_ms": self.wall_ms})


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    out: dict = {"rounds": [], "path": str(path)}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such manifest") from None
    for line in lines:
        if not line.strip():
            continue
        obj = json.loads(line)
        kind = obj.get("kind")
        if kind == "round":
            out["rounds"].append(RoundRecord.from_dict(obj))
        else:
            out[kind] = obj
    if "config" not in out or "final" not in out:
        raise ConfigError(f"{path}: incomplete manifest")
    out["run_kind"] = out["config"]["run_kind"]
    return out


def _metrics_dict(rep: Optional[MetricReport]):
    return None if rep is None else rep.to_dict()


def run_federated(cfg: RunConfig, prep: Prepared, out_dir=None) -> dict:
    fcfg = cfg.federation()
    w = ManifestWriter(out_dir or cfg.out_dir(), "federated", cfg)
    w.write({"kind": "dataset", **_dataset_line(prep)})
    clients = [make_client(k, ds, fcfg) for k, ds in enumerate(prep.owners)]
    params, records = run_federation(fcfg, clients, prep.test)
    w.rounds(records)
    ckpt = save_checkpoint(w.dir / "checkpoints" / "final.fnlm", fcfg.arch, params)
    rep = evaluate_model(fcfg.arch, params, prep.test, fcfg.threshold)
    final = {"kind": "final", "run_kind": "federated", "appliance": cfg.appliance, "K": cfg.K,
             "metrics": _metrics_dict(rep), "params_digest": params_digest(params),
             "checkpoint": str(ckpt.relative_to(w.dir)), "epochs_per_client": cfg.R * cfg.E}
    w.write(final)
    w.close()
    return final


def run_central(cfg: RunConfig, prep: Prepared, out_dir=None) -> dict:
    fcfg = cfg.federation()
    w = ManifestWriter(out_dir or cfg.out_dir(), "central", cfg)
    w.write({"kind": "dataset", **_dataset_line(prep)})
    full = concat_datasets(prep.owners)
    params, records = train_central(fcfg, full, prep.test)
    w.rounds(records)
    ckpt = save_checkpoint(w.dir / "checkpoints" / "final.fnlm", fcfg.arch, params)
    rep = evaluate_model(fcfg.arch, params, prep.test, fcfg.threshold)
    final = {"kind": "final", "run_kind": "central", "appliance": cfg.appliance, "K": cfg.K,
             "metrics": _metrics_dict(rep), "params_digest": params_digest(params),
             "checkpoint": str(ckpt.relative_to(w.dir)), "n_train": full.N, "total_epochs": cfg.R * cfg.E}
    w.write(final)
    w.close()
    return final


def run_local(cfg: RunConfig, prep: Prepared, out_dir=None) -> dict:
    fcfg = cfg.federation()
    w = ManifestWriter(out_dir or cfg.out_dir(), "local", cfg)
    w.write({"kind": "dataset", **_dataset_line(prep)})
    clients = [make_client(k, ds, fcfg) for k, ds in enumerate(prep.owners)]
    results = train_local_baselines(fcfg, clients, prep.test)
    entries = []
    for cid, params, rep in results:
        ckpt = save_checkpoint(w.dir / "checkpoints" / f"local_{cid:02d}.fnlm", fcfg.arch, params)
        entries.append({"client_id": cid, "metrics": _metrics_dict(rep), "params_digest": params_digest(params),
                        "checkpoint": str(ckpt.relative_to(w.dir))})
    reps = [r for _, _, r in results]
    final = {"kind": "final", "run_kind": "local", "appliance": cfg.appliance, "K": cfg.K, "clients": entries,
             "avg_mae": float(np.mean([r.mae for r in reps])), "avg_f1": float(np.mean([r.f1 for r in reps])),
             "total_epochs": cfg.R * cfg.E}
    w.write(final)
    w.close()
    return final


def _dataset_line(prep: Prepared) -> dict:
    return {
        "owner_digests": [dataset_digest(o) for o in prep.owners],
        "test_digest": dataset_digest(prep.test),
        "owner_windows": [o.N for o in prep.owners],
        "n_test": prep.test.N,
        "source": prep.info.get("source"),
    }
