"""Command-line entry point: ``fednilm <command> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 protocol error,
5 training aborted.  ``FEDNILM_OUTPUT_DIR`` overrides the configured output
directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
from pathlib import Path

from . import __version__
from .data import ApplianceThreshold, load_dataset
from .errors import ConfigError, FedNilmError
from .experiment import (
    OUTPUT_ENV,
    ManifestWriter,
    RunConfig,
    apply_overrides,
    prepare_datasets,
    read_manifest,
    run_central,
    run_federated,
    run_local,
    save_prepared,
)
from .fedavg import make_client, params_digest
from .metrics import compare as compare_values
from .metrics import evaluate_model
from .model import load_checkpoint, save_checkpoint
from .netproto import Coordinator, client_run

log = logging.getLogger("fednilm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL, EXIT_ABORTED = 0, 2, 3, 4, 5

COMPARISON_COLUMNS = [
    "appliance",
    "K",
    "loc_mae",
    "loc_f1",
    "cent_mae",
    "cent_f1",
    "fed_mae",
    "fed_f1",
    "imp_mae_pct",
    "imp_f_pct",
    "gap_mae_pct",
    "gap_f_pct",
]


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for flag in ("K", "R", "E", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            out[flag] = v
    if getattr(args, "data_dir", None):
        out["data.source"] = "cached"
        out["data.dir"] = args.data_dir
    return out


def load_config(args) -> RunConfig:
    over = _overrides(args)
    if args.config:
        return RunConfig.load(args.config, over)
    return RunConfig.from_dict(apply_overrides({"scenario": args.scenario}, over))


def _prepare_into(cfg: RunConfig, out: Path) -> dict:
    prep = prepare_datasets(cfg)
    info = save_prepared(prep, out)
    if info.get("truncated_at_s") is not None:
        print(f"alignment truncated at t={info['truncated_at_s']}: dropped {info['dropped_s']:.0f} s", file=sys.stderr)
    return info


def cmd_synth(args) -> int:
    cfg = load_config(args)
    if cfg.data["source"] != "synthetic":
        raise ConfigError("synth needs a synthetic data source")
    out = Path(args.out or cfg.out_dir() / "data")
    info = _prepare_into(cfg, out)
    print(json.dumps({"dir": str(out), "owner_windows": info["owner_windows"], "n_test": info["n_test"]}))
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = load_config(args)
    if cfg.data["source"] != "csv":
        raise ConfigError("ingest needs a csv data source")
    out = Path(args.out or cfg.out_dir() / "data")
    info = _prepare_into(cfg, out)
    print(json.dumps({"dir": str(out), "owner_windows": info["owner_windows"], "n_test": info["n_test"],
                      "threshold_w": info["threshold_w"], "dropped_s": info["dropped_s"]}))
    return EXIT_OK


def cmd_train_federated(args) -> int:
    cfg = load_config(args)
    if args.distributed:
        return _serve(cfg, args)
    final = run_federated(cfg, prepare_datasets(cfg), args.out)
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_train_central(args) -> int:
    cfg = load_config(args)
    print(json.dumps(run_central(cfg, prepare_datasets(cfg), args.out), sort_keys=True))
    return EXIT_OK


def cmd_train_local(args) -> int:
    cfg = load_config(args)
    print(json.dumps(run_local(cfg, prepare_datasets(cfg), args.out), sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec, params = load_checkpoint(args.checkpoint)
    test = load_dataset(args.data)
    if args.threshold is not None:
        thr = ApplianceThreshold(args.appliance or "appliance", args.threshold)
    elif args.appliance:
        thr = ApplianceThreshold.lookup(args.appliance)
    else:
        raise ConfigError("evaluate needs --appliance or --threshold")
    rep = evaluate_model(spec, params, test, thr, status_mae=args.status_mae)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_OK


def _final_metrics(m: dict) -> tuple[float, float]:
    fin = m["final"]
    if m["run_kind"] == "local":
        return fin["avg_mae"], fin["avg_f1"]
    met = fin["metrics"]
    mae = float("nan") if met["mae"] is None else met["mae"]
    return mae, met["f1"]


def comparison_row(fed: dict, cent: dict, loc: dict) -> dict:
    loc_mae, loc_f1 = _final_metrics(loc)
    cent_mae, cent_f1 = _final_metrics(cent)
    fed_mae, fed_f1 = _final_metrics(fed)
    rep = compare_values(loc_mae, fed_mae, cent_mae, loc_f1, fed_f1, cent_f1, strict=False)
    return {
        "appliance": fed["final"].get("appliance", ""),
        "K": fed["final"].get("K", ""),
        "loc_mae": loc_mae,
        "loc_f1": loc_f1,
        "cent_mae": cent_mae,
        "cent_f1": cent_f1,
        "fed_mae": fed_mae,
        "fed_f1": fed_f1,
        "imp_mae_pct": rep.imp_mae_pct,
        "imp_f_pct": rep.imp_f_pct,
        "gap_mae_pct": rep.gap_mae_pct,
        "gap_f_pct": rep.gap_f_pct,
    }


def _clean(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def cmd_compare(args) -> int:
    manifests = [read_manifest(p) for p in args.manifests]
    by_kind: dict[str, list] = {}
    for m in manifests:
        by_kind.setdefault(m["run_kind"], []).append(m)
    for kind in ("federated", "central", "local"):
        if kind not in by_kind:
            raise ConfigError(f"compare needs a {kind} manifest")
    if not (len(by_kind["federated"]) == len(by_kind["central"]) == len(by_kind["local"])):
        raise ConfigError("compare needs one federated, central and local manifest per row")
    rows = [comparison_row(f, c, l) for f, c, l in zip(by_kind["federated"], by_kind["central"], by_kind["local"])]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if _clean(v) is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    (out / "comparison.json").write_text(
        json.dumps([{k: _clean(v) for k, v in r.items()} for r in rows], indent=2, sort_keys=True) + "\n"
    )
    print(json.dumps([{k: _clean(v) for k, v in r.items()} for r in rows], sort_keys=True))
    return EXIT_OK


def export_plot_rows(manifest: dict) -> list[dict]:
    rows = []
    for rec in manifest["rounds"]:
        ev = rec.eval
        rows.append({
            "round": rec.round,
            "loss": rec.train_loss,
            "mae": "" if ev is None or math.isnan(ev.mae) else ev.mae,
            "f1": "" if ev is None else ev.f1,
            "evaluated": int(ev is not None),
        })
    return rows


def cmd_export_plot(args) -> int:
    m = read_manifest(args.manifest)
    rows = export_plot_rows(m)
    out = Path(args.out) if args.out else Path(m["path"]).parent / "plots" / "curves.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["round", "loss", "mae", "f1", "evaluated"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    print(str(out))
    return EXIT_OK


def _serve(cfg: RunConfig, args) -> int:
    fcfg = cfg.federation()
    K = args.expected or cfg.K
    out = Path(args.out or cfg.out_dir())
    coord = Coordinator(fcfg, args.bind, K, hello_timeout=args.hello_timeout)
    host, port = coord.address
    print(json.dumps({"listening": f"{host}:{port}"}), flush=True)
    procs = []
    if getattr(args, "spawn_clients", False):
        data_dir = cfg.data.get("dir")
        if cfg.data.get("source") != "cached" or not data_dir:
            raise ConfigError("--spawn-clients needs prepared datasets (--data-dir)")
        files = load_prepared_files(data_dir)
        cfg_path = out / "config.json"
        out.mkdir(parents=True, exist_ok=True)
        cfg_path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        for k in range(K):
            procs.append(subprocess.Popen([
                sys.executable, "-m", "fednilm", "client", "--connect", f"{host}:{port}",
                "--client-id", str(k), "--data", str(Path(data_dir) / files[k]), "--config", str(cfg_path),
            ]))
    writer = ManifestWriter(out, "federated-distributed", cfg)
    records = coord.run()
    writer.rounds(records)
    ckpt = save_checkpoint(writer.dir / "checkpoints" / "final.fnlm", fcfg.arch, coord.params)
    final = {"kind": "final", "run_kind": "federated-distributed", "appliance": cfg.appliance, "K": K,
             "metrics": None, "params_digest": params_digest(coord.params), "checkpoint": str(ckpt.relative_to(writer.dir)),
             "round_digests": [r.global_params_digest for r in records]}
    writer.write(final)
    writer.close()
    codes = [p.wait() for p in procs]
    print(json.dumps(final, sort_keys=True))
    if any(codes):
        return EXIT_PROTOCOL
    return EXIT_OK


def load_prepared_files(data_dir) -> list[str]:
    info = json.loads((Path(data_dir) / "data.json").read_text())
    return info["owners"]


def cmd_serve(args) -> int:
    return _serve(load_config(args), args)


def cmd_client(args) -> int:
    cfg = load_config(args)
    fcfg = cfg.federation()
    ds = load_dataset(args.data)
    client = make_client(args.client_id, ds, fcfg)
    return client_run(args.connect, client, fcfg)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (unknown keys are errors)")
    p.add_argument("--scenario", default="synthetic-small", help="preset used when no --config is given")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    p.add_argument("--K", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--E", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", help="use datasets prepared by synth/ingest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fednilm", description="Federated seq2point load disaggregation")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic owner/test datasets")
    _add_config_args(p)
    p.add_argument("--out", help="dataset directory (default <output_dir>/data)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="window a CSV recording into owner/test datasets")
    _add_config_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-federated", help="federated averaging run")
    _add_config_args(p)
    p.add_argument("--out", help=f"run directory (default: ${OUTPUT_ENV}, then config output_dir)")
    p.add_argument("--distributed", action="store_true", help="run as a network coordinator instead")
    p.add_argument("--bind", default="127.0.0.1:7733")
    p.add_argument("--expected", type=int, help="number of clients to wait for (default K)")
    p.add_argument("--spawn-clients", action="store_true", help="launch local client processes too")
    p.add_argument("--hello-timeout", type=float, default=120.0)
    p.set_defaults(func=cmd_train_federated)

    for name, fn, help_ in (
        ("train-central", cmd_train_central, "centrally-trained baseline"),
        ("train-local", cmd_train_local, "locally-trained baselines, one per owner"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_config_args(p)
        p.add_argument("--out")
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="score a checkpoint on a prepared test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared .fnds test set")
    p.add_argument("--appliance")
    p.add_argument("--threshold", type=float, help="power-on threshold in watts")
    p.add_argument("--status-mae", action="store_true", help="classification: report MAE over 0/1 status")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="improvement/gap indicators from run manifests")
    p.add_argument("manifests", nargs="+", help="manifest.jsonl files or run directories")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export-plot", help="per-round loss/MAE/F1 as CSV")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_plot)

    p = sub.add_parser("serve", help="network coordinator")
    _add_config_args(p)
    p.add_argument("--bind", default="127.0.0.1:7733")
    p.add_argument("--expected", type=int)
    p.add_argument("--out")
    p.add_argument("--spawn-clients", action="store_true")
    p.add_argument("--hello-timeout", type=float, default=120.0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("client", help="network client (local data owner)")
    _add_config_args(p)
    p.add_argument("--connect", required=True)
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--data", required=True, help="prepared .fnds owner dataset")
    p.set_defaults(func=cmd_client)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedNilmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ConnectionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
