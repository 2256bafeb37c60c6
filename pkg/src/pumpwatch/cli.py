"""Command-line entry point.

Every command takes ``--config FILE`` (flat key=value) and repeated
``--set key=value`` overrides; precedence is flag > file > default.  Each
run writes ``manifest.json`` into its output directory with the resolved
config, its sha256, the seeds, input digests and the package version;
``pumpwatch replay manifest.json`` reruns it.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

SEED_ENV = "PUMPWATCH_SEED"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass(frozen=True)
class FetchConfig:
    symbols: str = ""  # comma-separated
    start: str = ""
    end: str = ""
    endpoint: str = "https://api.binance.com/api/v3/klines"


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0.0.0+local"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        out[k.strip()] = v.strip()
    return out


def _config_class(command: str):
    from .synthmarket import SynthConfig
    from .trainer import TrainConfig

    return {"synth": SynthConfig, "fetch": FetchConfig, "ingest": None}.get(command, TrainConfig)


def _resolve_config(command: str, args) -> object | None:
    from . import config as cfgio

    cls = _config_class(command)
    if cls is None:
        return None
    overrides = {}
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        names = {f.name for f in fields(cls)}
        if "seed" in names:
            overrides["seed"] = seed
        elif "seeds" in names:
            overrides["seeds"] = seed
    base = cfgio.apply_pairs(cls(), overrides) if overrides else cls()
    if args.config:
        base = cfgio.apply_pairs(base, cfgio.parse_pairs(Path(args.config).read_text().splitlines()))
    flags = {k: v for k, v in getattr(args, "shortcuts", {}).items() if v is not None}
    flags.update(_parse_sets(args.set))
    if flags:
        base = cfgio.apply_pairs(base, flags)
    return base


def _seeds_of(cfg) -> list[int]:
    if cfg is None:
        return []
    d = asdict(cfg)
    if "seeds" in d:
        return list(d["seeds"])
    if "seed" in d:
        return [d["seed"]]
    return []


def _write_manifest(out: Path, command: str, cfg, inputs: dict[str, Path], outputs: list[Path]) -> None:
    from . import config as cfgio

    manifest = {
        "command": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()} if cfg else {},
        "config_sha256": cfgio.digest(cfg) if cfg else None,
        "seeds": _seeds_of(cfg),
        "inputs": {k: {"path": str(Path(p).resolve()), "sha256": sha256_file(p)} for k, p in inputs.items()},
        "outputs": {p.name: sha256_file(p) for p in outputs if p.is_file()},
        "version": _version(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# commands ------------------------------------------------------------------


def _cmd_synth(args, cfg, out: Path):
    from .panel import write_panel_csv
    from .synthmarket import generate, write_ground_truth_csv

    panel, truth = generate(cfg)
    write_panel_csv(panel, out / "panel.csv")
    write_ground_truth_csv(truth, out / "ground_truth.csv")
    return {}, [out / "panel.csv", out / "ground_truth.csv"]


def _cmd_fetch(args, cfg, out: Path):
    from .fetch import fetch_klines
    from .panel import parse_ts

    symbols = [s.strip() for s in cfg.symbols.split(",") if s.strip()]
    if not symbols or not cfg.start or not cfg.end:
        raise UsageError("fetch needs symbols, start and end (use --set)")
    written = []
    for sym in symbols:
        rows = fetch_klines(cfg.endpoint, sym, parse_ts(cfg.start), parse_ts(cfg.end))
        path = out / f"{sym}.csv"
        path.write_text("".join(r + "\n" for r in rows))
        written.append(path)
    return {}, written


def _cmd_ingest(args, cfg, out: Path):
    from .panel import assemble_panel, parse_kline_rows, read_pump_schedule, write_panel_csv

    if not args.klines:
        raise UsageError("ingest needs --klines DIR")
    kdir = Path(args.klines)
    files = sorted(kdir.glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no *.csv kline files in {kdir}")
    series = {f.stem: parse_kline_rows(f.read_text().splitlines()) for f in files}
    events = read_pump_schedule(Path(args.schedule)) if args.schedule else []
    panel = assemble_panel(series, events)
    write_panel_csv(panel, out / "panel.csv")
    inputs = {f"klines/{f.name}": f for f in files}
    if args.schedule:
        inputs["schedule"] = Path(args.schedule)
    return inputs, [out / "panel.csv"]


def _load_panel(args):
    from .panel import read_panel_csv

    if not args.panel:
        raise UsageError("--panel is required")
    return read_panel_csv(args.panel)


def _cmd_features(args, cfg, out: Path):
    from .features import build_feature_matrix, standardize, write_feature_csv
    from .trainer import split_for

    panel = _load_panel(args)
    split = split_for(panel, cfg)
    raw = build_feature_matrix(panel)
    std, stats = standardize(raw, split.train)
    write_feature_csv(raw, panel.labels, out / "features_raw.csv")
    write_feature_csv(std, panel.labels, out / "features.csv")
    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mean", "std"])
        for name, m, s in zip(raw.feature_names, stats.mean, stats.std):
            w.writerow([name, repr(float(m)), repr(float(s))])
    return {"panel": Path(args.panel)}, [out / "features_raw.csv", out / "features.csv", out / "scaling.csv"]


def _cmd_graph(args, cfg, out: Path):
    from .errors import ConfigError
    from .graphcraft import build_dynamic_timeline, build_static_graph, write_edges_csv, write_timeline_csv
    from .trainer import split_for

    panel = _load_panel(args)
    split = split_for(panel, cfg)
    if cfg.strategy == "G1":
        path = out / "edges.csv"
        write_edges_csv(build_static_graph(panel, cfg.signal, split.train, cfg.rho, cfg.tau_min), path)
    elif cfg.strategy == "G2":
        path = out / "timeline.csv"
        tl = build_dynamic_timeline(panel, cfg.signal, split.train, cfg.L, cfg.rho, cfg.tau_min)
        write_timeline_csv(tl, panel.timestamps, path)
    else:
        raise ConfigError(f"graph export supports G1 and G2; {cfg.strategy} has no precomputed graph")
    return {"panel": Path(args.panel)}, [path]


def _cmd_train(args, cfg, out: Path):
    from .numcore import save_checkpoint
    from .trainer import fit, prepare, write_history_csv

    panel = _load_panel(args)
    prep = prepare(panel, cfg)
    outputs = []
    for seed in cfg.seeds:
        result = fit(None, cfg, seed, prep)
        model = result.model()
        ckpt = out / f"seed_{seed}.ckpt"
        meta = {
            "seed": seed,
            "gamma": result.gamma,
            "best_epoch": result.best_epoch,
            "pos_weight": result.pos_weight,
            "model_config": result.model_config.to_text(),
        }
        save_checkpoint(ckpt, model.params, meta=meta)
        hist = out / f"history_seed_{seed}.csv"
        write_history_csv(result.history, hist)
        outputs += [ckpt, hist]
    (out / "train.cfg").write_text(_dump(cfg))
    outputs.append(out / "train.cfg")
    return {"panel": Path(args.panel)}, outputs


def _dump(cfg) -> str:
    from . import config as cfgio

    return cfgio.dump(cfg)


def _load_fits(run: Path, cfg):
    from .numcore.checkpoint import read_arrays
    from .stgnn import ModelConfig
    from .trainer import FitResult

    fits = []
    for seed in cfg.seeds:
        path = run / f"seed_{seed}.ckpt"
        arrays, meta = read_arrays(path)
        fits.append(
            FitResult(arrays, float(meta["gamma"]), [], int(meta["seed"]), int(meta["best_epoch"]), float(meta["pos_weight"]), ModelConfig.from_text(meta["model_config"]))
        )
    return fits


def _cmd_eval(args, cfg, out: Path):
    from .metrics import per_token_report
    from .panel import format_ts
    from .trainer import ProtocolReport, TestGate, prepare

    if not args.run:
        raise UsageError("eval needs --run DIR (a train output directory)")
    run = Path(args.run)
    panel = _load_panel(args)
    prep = prepare(panel, cfg)
    gate = TestGate()
    report = ProtocolReport(list(cfg.seeds), {}, {}, {})
    outputs = []
    inputs = {"panel": Path(args.panel)}
    for fit_result in _load_fits(run, cfg):
        seed = fit_result.seed
        inputs[f"seed_{seed}.ckpt"] = run / f"seed_{seed}.ckpt"
        ev = gate.evaluate(fit_result, prep, cfg.eval_batch)
        report.per_seed[seed] = ev.metrics
        report.gammas[seed] = fit_result.gamma
        pred = out / f"predictions_seed_{seed}.csv"
        with open(pred, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["symbol", "timestamp_utc", "prob", "label", "valid", "gamma"])
            for b, t in enumerate(ev.anchors):
                for i, tok in enumerate(panel.tokens):
                    w.writerow([tok, format_ts(panel.timestamps[t]), repr(float(ev.probs[b, i])), int(ev.labels[b, i]), int(ev.mask[b, i]), repr(fit_result.gamma)])
        tok_path = out / f"per_token_seed_{seed}.csv"
        with open(tok_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["symbol", "n_events", "precision", "recall", "f1"])
            for r in per_token_report((ev.probs >= ev.gamma).T, ev.labels.T, panel.tokens, ev.mask.T, cfg.min_events):
                w.writerow([r.token, r.n_events, repr(r.precision), repr(r.recall), repr(r.f1)])
        outputs += [pred, tok_path]
    report.write_csv(out / "metrics.csv")
    outputs.append(out / "metrics.csv")
    return inputs, outputs


def _read_predictions(path: Path):
    import numpy as np

    probs, labels, valid = [], [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            probs.append(float(rec["prob"]))
            labels.append(int(rec["label"]))
            valid.append(int(rec["valid"]))
    return np.array(probs), np.array(labels), np.array(valid, dtype=bool)


def _cmd_report(args, cfg, out: Path):
    from .metrics import pr_curve, write_pr_csv, write_pr_svg

    if not args.run:
        raise UsageError("report needs --run DIR (an eval output directory)")
    run = Path(args.run)
    files = sorted(run.glob("predictions_seed_*.csv"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not files:
        raise FileNotFoundError(f"no predictions_seed_*.csv in {run}")
    curves, outputs, inputs = {}, [], {}
    for f in files:
        seed = f.stem.rsplit("_", 1)[1]
        curve = pr_curve(*_read_predictions(f))
        path = out / f"pr_curve_seed_{seed}.csv"
        write_pr_csv(curve, path)
        curves[f"seed {seed} (AUC {curve.auc:.3f})"] = (curve.recall, curve.precision)
        outputs.append(path)
        inputs[f.name] = f
    svg = out / "pr_curve.svg"
    write_pr_svg(curves, svg)
    outputs.append(svg)
    return inputs, outputs


COMMANDS = {
    "fetch": _cmd_fetch,
    "ingest": _cmd_ingest,
    "features": _cmd_features,
    "graph": _cmd_graph,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pumpwatch", description="Pump-event detection on hourly token panels.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key=value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
        if name in ("features", "graph", "train", "eval"):
            s.add_argument("--panel", help="panel CSV")
        if name in ("eval", "report"):
            s.add_argument("--run", help="directory produced by the previous stage")
        if name == "ingest":
            s.add_argument("--klines", help="directory of <SYMBOL>.csv kline files")
            s.add_argument("--schedule", help="pump schedule CSV (symbol,timestamp_utc)")
        if name == "graph":
            s.add_argument("--strategy", dest="sc_strategy")
            s.add_argument("--signal", dest="sc_signal")
            s.add_argument("--rho", dest="sc_rho")
            s.add_argument("--tau-min", dest="sc_tau_min")
            s.add_argument("--L", dest="sc_L")
    r = sub.add_parser("replay", help="rerun a command from its manifest.json")
    r.add_argument("manifest")
    r.add_argument("--out", default=None, help="output directory (default: the manifest's directory)")
    r.add_argument("--threads", type=int, default=None)
    return p


def _shortcuts(args) -> dict[str, str | None]:
    return {k[3:]: v for k, v in vars(args).items() if k.startswith("sc_")}


def _replay_argv(manifest_path: str, out: str | None) -> list[str]:
    mpath = Path(manifest_path)
    m = json.loads(mpath.read_text())
    argv = [m["command"], "--out", out or str(mpath.parent)]
    pairs = {k: ",".join(map(str, v)) if isinstance(v, list) else str(v) for k, v in m["config"].items()}
    for k, v in pairs.items():
        argv += ["--set", f"{k}={v}"]
    for key, rec in m["inputs"].items():
        if sha256_file(rec["path"]) != rec["sha256"]:
            raise ValueError(f"input {key} changed since the manifest was written: {rec['path']}")
    inputs = m["inputs"]
    if "panel" in inputs:
        argv += ["--panel", inputs["panel"]["path"]]
    if m["command"] in ("eval", "report"):
        run = {str(Path(r["path"]).parent) for k, r in inputs.items() if k != "panel"}
        argv += ["--run", run.pop()]
    if m["command"] == "ingest":
        kl = {str(Path(r["path"]).parent) for k, r in inputs.items() if k.startswith("klines/")}
        argv += ["--klines", kl.pop()]
        if "schedule" in inputs:
            argv += ["--schedule", inputs["schedule"]["path"]]
    return argv


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    if args.command == "replay":
        new_argv = _replay_argv(args.manifest, args.out)
        os.environ.pop(SEED_ENV, None)
        return run(new_argv)
    args.shortcuts = _shortcuts(args)
    cfg = _resolve_config(args.command, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs, outputs = COMMANDS[args.command](args, cfg, out)
    _write_manifest(out, args.command, cfg, inputs, outputs)
    return 0


def main(argv: list[str] | None = None) -> int:
    from .errors import PumpwatchError, UnknownKey

    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except (UsageError, UnknownKey) as exc:
        print(f"pumpwatch: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (PumpwatchError, ValueError, KeyError, OSError) as exc:
        print(f"pumpwatch: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
