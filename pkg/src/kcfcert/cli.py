"""Batch command-line front end.

Commands wire the pipeline: generate-data -> fit/train -> certify -> rollout
-> report.  Every command writes its artifacts plus a manifest into a run
directory; report.json, data.csv, and stats.csv are deterministic for fixed
seeds (the manifest records wall-clock and is exempt).

Artifacts by command:
  generate-data : data.csv, data.json, manifest.json
  fit / train   : dict.json, model.json, report.json, manifest.json
  certify       : report.json, manifest.json
  rollout       : stats.csv, manifest.json
  report        : report.json, report.md, report.csv, manifest.json
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import certify
from .dictionary import basis_from_spec
from .errors import ArtifactError, KcfError, ValidationError
from .learning import TrainConfig, train
from .predictor import error_statistics, rollout, write_error_csv
from .regression import FittedModel, SnapshotDataset, fit_top_block
from .systems import (
    ExperimentProtocol,
    collect,
    dc_motor,
    random_input_sequence,
    simulate_trajectory,
    system_from_meta,
)

STRUCTURE_CLASS = {"lifted-linear": "linear", "bilinear": "bilinear"}


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    return json.loads(path.read_text())


def _out_dir(arg) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command, config, inputs, outputs, started) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(outputs),
        "version": __version__,
        "wall_clock_s": round(time.monotonic() - started, 3),
        "created": datetime.now(timezone.utc).isoformat(),
    })


def _load_dataset(data_dir) -> SnapshotDataset:
    path = Path(data_dir) / "data.csv"
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    return SnapshotDataset.load(path)


def _load_model(model_dir):
    model_dir = Path(model_dir)
    basis = basis_from_spec(_read_json(model_dir / "dict.json"))
    model = FittedModel.from_payload(_read_json(model_dir / "model.json"), basis)
    return basis, model


def _split_of(data: SnapshotDataset, name: str) -> SnapshotDataset:
    if name == "train":
        return data.train
    if name == "test":
        if data.n_test == 0:
            raise ValidationError("dataset has no test split")
        return data.test
    if name == "all":
        return data
    raise ValidationError(f"unknown split {name!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    started = time.monotonic()
    system = dc_motor(args.input_nonlinearity)
    x0 = np.array([float(v) for v in args.x0.split(",")])
    protocol = ExperimentProtocol(
        duration=args.duration, dt=args.dt, hold=args.hold, x0=x0,
        seed=args.seed, train_fraction=args.train_fraction, split=args.split,
    )
    data = collect(system, protocol)
    out = _out_dir(args.out)
    data.save(out / "data.csv")
    _write_manifest(out, "generate-data", {
        "system": system.tag, "duration": args.duration, "dt": args.dt,
        "hold": args.hold, "x0": x0.tolist(), "seed": args.seed,
        "train_fraction": args.train_fraction, "split": args.split,
    }, [], ["data.csv", "data.json"], started)
    print(f"wrote {data.n_snapshots} snapshots "
          f"({data.n_train} train / {data.n_test} test) to {out}")
    return 0


def _certify_payload(model, data, splits, model_class) -> dict:
    payload = {"model_class": model_class, "splits": {}}
    for name in splits:
        report = certify(model.basis, _split_of(data, name))
        payload["splits"][name] = report.summary()
    return payload


def _print_certificates(payload) -> None:
    print(f"{'model':<12} {'split':<8} {'CCI':>14} {'RRMSE_max':>14} {'trace':>14}")
    for name, rep in payload["splits"].items():
        print(f"{payload['model_class']:<12} {name:<8} "
              f"{rep['cci']:>14.6e} {rep['rrmse_max']:>14.6e} {rep['trace']:>14.6e}")


def cmd_fit(args) -> int:
    started = time.monotonic()
    data = _load_dataset(args.data)
    spec = _read_json(Path(args.dict))
    basis = basis_from_spec(spec)
    fit_data = _split_of(data, args.split)
    model = fit_top_block(basis, fit_data)
    model_class = STRUCTURE_CLASS.get(basis.g.structure, "separable")

    out = _out_dir(args.out)
    _write_json(out / "dict.json", basis.to_spec())
    _write_json(out / "model.json", model.to_payload())
    payload = _certify_payload(model, data, ["train", "test"] if data.n_test else ["train"],
                               model_class)
    _write_json(out / "report.json", payload)
    _write_manifest(out, "fit", {"split": args.split, "dict": str(args.dict)},
                    [args.data, args.dict],
                    ["dict.json", "model.json", "report.json"], started)
    _print_certificates(payload)
    print(f"fit residual (relative): {model.diagnostics['relative_residual']:.3e}")
    return 0


def _config_from_args(args) -> TrainConfig:
    fields = {}
    if args.config:
        raw = _read_json(Path(args.config))
        tuple_keys = {"hidden", "pinned", "betas"}
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        fields = {k: tuple(v) if k in tuple_keys else v for k, v in raw.items()}
    config = TrainConfig(**fields)
    if args.paper_scale:
        config = config.paper_scale()
    if args.epochs is not None:
        config = TrainConfig(**{**asdict(config), "epochs": args.epochs})
    if args.seed is not None:
        config = TrainConfig(**{**asdict(config), "seed": args.seed})
    return config


def cmd_train(args) -> int:
    started = time.monotonic()
    data = _load_dataset(args.data)
    config = _config_from_args(args)
    out = _out_dir(args.out)
    result = train(
        data, args.model_class, config,
        checkpoint_dir=out if args.checkpoint_every else None,
        checkpoint_every=args.checkpoint_every,
        log=(lambda rec: print(
            f"epoch {rec['epoch'] + 1:>4}/{config.epochs}  "
            f"loss {rec['loss']:.6e}  lr {rec['lr']:.2e}"
        )) if args.verbose else None,
    )
    _write_json(out / "dict.json", result.basis.to_spec())
    model_payload = result.fitted.to_payload()
    model_payload["model_class"] = result.model_class
    model_payload["training_history"] = result.history
    _write_json(out / "model.json", model_payload)
    payload = {
        "model_class": result.model_class,
        "splits": {name: rep.summary() for name, rep in result.reports.items()},
    }
    _write_json(out / "report.json", payload)
    cfg = asdict(config)
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    _write_manifest(out, "train", {"class": args.model_class, **cfg},
                    [args.data], ["dict.json", "model.json", "report.json"], started)
    _print_certificates(payload)
    return 0


def cmd_certify(args) -> int:
    started = time.monotonic()
    basis, model = _load_model(args.model)
    data = _load_dataset(args.data)
    splits = ["train", "test"] if args.split == "all" else [args.split]
    model_meta = _read_json(Path(args.model) / "model.json")
    model_class = model_meta.get(
        "model_class", STRUCTURE_CLASS.get(basis.g.structure, "separable")
    )
    payload = _certify_payload(model, data, splits, model_class)
    out = _out_dir(args.out or args.model)
    _write_json(out / "report.json", payload)
    _write_manifest(out, "certify", {"split": args.split},
                    [args.model, args.data], ["report.json"], started)
    _print_certificates(payload)
    return 0


def cmd_rollout(args) -> int:
    started = time.monotonic()
    basis, model = _load_model(args.model)
    data = _load_dataset(args.data)
    system = system_from_meta(data.meta)
    dt = data.meta.get("dt")
    if dt is None:
        raise ValidationError("dataset metadata lacks dt; cannot simulate truth")
    hold_steps = args.hold_steps
    if hold_steps is None:
        hold_steps = max(1, int(round(data.meta.get("hold", dt) / dt)))
    pool = data.test if data.n_test else data.train
    if args.count < 1 or args.horizon < 1:
        raise ValidationError("count and horizon must be positive")

    rng = np.random.default_rng(args.seed)
    starts = pool.x[:, rng.integers(0, pool.n_snapshots, size=args.count)]
    inputs = [
        random_input_sequence(system, args.horizon, hold_steps, rng)
        for _ in range(args.count)
    ]

    def one(k):
        truth = simulate_trajectory(system, starts[:, k], inputs[k], dt)
        return rollout(model, starts[:, k], inputs[k], truth=truth).errors

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool_exec:
            errors = list(pool_exec.map(one, range(args.count)))
    else:
        errors = [one(k) for k in range(args.count)]

    stats = error_statistics(errors)
    if args.coordinates == "states":
        stats = {key: val[: system.n] for key, val in stats.items()}
    out = _out_dir(args.out)
    write_error_csv(out / "stats.csv", stats)
    _write_manifest(out, "rollout", {
        "horizon": args.horizon, "count": args.count, "seed": args.seed,
        "hold_steps": hold_steps, "coordinates": args.coordinates,
        "jobs": args.jobs,
    }, [args.model, args.data], ["stats.csv"], started)
    print(f"wrote statistics for {args.count} rollouts x {args.horizon} steps to {out}")
    return 0


def cmd_report(args) -> int:
    started = time.monotonic()
    rows = []
    for model_dir in args.models:
        payload = _read_json(Path(model_dir) / "report.json")
        splits = payload["splits"]
        rows.append({
            "model_class": payload["model_class"],
            "rrmse_max_train": splits.get("train", {}).get("rrmse_max"),
            "rrmse_max_test": splits.get("test", {}).get("rrmse_max"),
            "source": str(model_dir),
        })

    fmt = lambda v: "" if v is None else f"{v:.6f}"
    lines = [
        "| Model | RRMSE_max (train) | RRMSE_max (test) |",
        "|---|---|---|",
    ]
    for row in rows:
        lines.append(f"| {row['model_class']} | {fmt(row['rrmse_max_train'])} "
                     f"| {fmt(row['rrmse_max_test'])} |")
    table = "\n".join(lines)
    print(table)

    if args.out:
        out = _out_dir(args.out)
        _write_json(out / "report.json", {"rows": rows})
        (out / "report.md").write_text(table + "\n")
        with (out / "report.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["model_class", "rrmse_max_train", "rrmse_max_test", "source"]
            )
            writer.writeheader()
            writer.writerows(rows)
        _write_manifest(out, "report", {"models": [str(m) for m in args.models]},
                        list(args.models),
                        ["report.json", "report.md", "report.csv"], started)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kcfcert",
        description="Lifted surrogate models with sharp prediction-error certificates.",
    )
    parser.add_argument("--version", action="version", version=f"kcfcert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="simulate a system and collect snapshots")
    p.add_argument("--system", choices=["dc-motor"], default="dc-motor")
    p.add_argument("--input-nonlinearity", choices=["tanh", "tanh-cos"], default="tanh")
    p.add_argument("--duration", type=float, default=50.0, help="experiment length (s)")
    p.add_argument("--dt", type=float, default=0.005, help="sample time (s)")
    p.add_argument("--hold", type=float, default=0.2, help="input hold time (s)")
    p.add_argument("--x0", default="0,0", help="initial state, comma separated")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split", choices=["random", "contiguous"], default="random")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("fit", help="closed-form regression with a given dictionary")
    p.add_argument("--data", required=True)
    p.add_argument("--dict", required=True, help="basis definition JSON")
    p.add_argument("--split", choices=["train", "all"], default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="learn a dictionary by consistency-trace descent")
    p.add_argument("--class", dest="model_class", required=True,
                   choices=["separable", "bilinear", "linear"])
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--paper-scale", action="store_true",
                   help="full-size recipe: 64x4 hidden, 500 epochs")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="consistency certificate on a data split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    p.add_argument("--out", help="defaults to the model directory")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("rollout", help="multi-step prediction error statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hold-steps", type=int, help="input hold in steps; default from data")
    p.add_argument("--coordinates", choices=["states", "all"], default="states")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("report", help="aggregate certified numbers into a table")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KcfError as exc:
        print(f"kcfcert: error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"kcfcert: error[ArtifactError]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
