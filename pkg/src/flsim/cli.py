"""Command-line front end.

Subcommands: run a single experiment, synthesize datasets, sanity-check a
converted dataset file, print the per-round overhead table, or sweep a
hyperparameter grid. Flags override config-file keys; exit codes are 0 on
success, 2 for usage errors and 3 when a run diverges.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import algorithms as alg
from . import data as ds
from . import engine
from . import nn

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

CONFIG_KEYS = ("algo", "model", "K", "N", "T", "B", "mu", "mu_s", "eps",
               "l1", "l2", "beta_self", "ro", "ro_momentum", "seed",
               "topology", "partition", "quantize_bits", "quantize_numerics",
               "alternate", "dataset", "valset", "out")

_INT_KEYS = {"K", "N", "T", "B", "seed", "quantize_bits"}
_FLOAT_KEYS = {"mu", "mu_s", "eps", "l1", "l2", "beta_self", "ro", "ro_momentum"}
_BOOL_KEYS = {"quantize_numerics"}


def parse_config_file(path) -> dict:
    """Read flat key=value lines; blank lines and # comments are skipped."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value):
    if isinstance(value, str):
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            return value.lower() in ("1", "true", "yes", "on")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flsim",
        description="Server-less federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    _add_run_flags(run_p)

    synth_p = sub.add_parser("synth", help="generate a synthetic dataset file")
    synth_p.add_argument("--kind", choices=("radar", "digits"), default="radar")
    synth_p.add_argument("--n", type=int, default=16000)
    synth_p.add_argument("--classes", type=int, default=None)
    synth_p.add_argument("--dim", type=int, default=None)
    synth_p.add_argument("--noise", type=float, default=None)
    synth_p.add_argument("--seed", type=int, default=1)
    synth_p.add_argument("--out", required=True)

    check_p = sub.add_parser("convert-check",
                             help="validate a native dataset file")
    check_p.add_argument("path")

    bench_p = sub.add_parser("bench-overhead",
                             help="print bytes per round per device")
    bench_p.add_argument("--bits", type=int, default=16)

    sweep_p = sub.add_parser("sweep", help="run a grid of configurations")
    _add_run_flags(sweep_p)
    sweep_p.add_argument("--grid", action="append", default=[],
                         metavar="KEY=V1,V2,...",
                         help="axis of the sweep; repeatable")
    sweep_p.add_argument("--target", type=float, default=0.5,
                         help="validation-loss threshold for round counts")
    return parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-l1", type=float, default=None, metavar="L1",
                   help="learning rate (gradient exchange) for the hidden layer")
    p.add_argument("-l2", type=float, default=None, metavar="L2",
                   help="learning rate (gradient exchange) for the output layer")
    p.add_argument("-mu", type=float, default=None,
                   help="learning rate for local SGD")
    p.add_argument("-eps", type=float, default=None,
                   help="mixing parameter for model averaging")
    p.add_argument("-K", type=int, default=None, help="number of network devices")
    p.add_argument("-N", type=int, default=None, help="number of neighbors per device")
    p.add_argument("-T", type=int, default=None, help="number of training epochs")
    p.add_argument("-ro", type=float, default=None,
                   help="hyperparameter of the gradient moving average")
    p.add_argument("--algo", choices=engine.ALGORITHMS, default=None)
    p.add_argument("--model", choices=("mnist-1fc", "cnn", "2nn", "toy"),
                   default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--B", type=int, default=None, help="mini-batch size")
    p.add_argument("--mu-s", dest="mu_s", type=float, default=None,
                   help="server-side learning rate")
    p.add_argument("--beta-self", dest="beta_self", type=float, default=None)
    p.add_argument("--ro-momentum", dest="ro_momentum", type=float, default=None,
                   help="momentum decay; enables the momentum variant")
    p.add_argument("--momentum", choices=("none", "classic", "nesterov"),
                   default=None)
    p.add_argument("--topology", default=None,
                   choices=("line", "ring", "full", "kregular"))
    p.add_argument("--partition", default=None,
                   help='"iid", "noniid" or "noniid:classes=A-B,per_node=N"')
    p.add_argument("--quantize-bits", dest="quantize_bits", type=int,
                   choices=(8, 16, 32), default=None)
    p.add_argument("--quantize-numerics", dest="quantize_numerics",
                   action="store_true", default=None)
    p.add_argument("--alternate", default=None,
                   help="comma-separated server round indices")
    p.add_argument("--dataset", default=None, help="training data (path or synth spec)")
    p.add_argument("--valset", default=None, help="validation data")
    p.add_argument("--val-stride", dest="val_stride", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--time", dest="measure_time", action="store_true",
                   default=None, help="record per-node update times")
    p.add_argument("--plot", action="store_true",
                   help="also render a loss-curve PNG")


_DEFAULTS = {
    "algo": "cfa", "model": "cnn", "K": 80, "N": 2, "T": 40, "B": 5,
    "mu": 0.025, "mu_s": None, "eps": 0.5, "l1": 0.1, "l2": None,
    "beta_self": None, "ro": 0.99, "ro_momentum": None, "seed": 1,
    "topology": "kregular", "partition": "iid", "quantize_bits": 16,
    "quantize_numerics": False, "alternate": None, "dataset": None,
    "valset": None, "out": None, "momentum": None, "val_stride": 1,
    "workers": 1, "measure_time": False,
}


def merge_settings(args: argparse.Namespace) -> dict:
    """Defaults, overridden by a config file, overridden by flags."""
    merged = dict(_DEFAULTS)
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            merged[key] = _coerce(key, value)
    for key in merged:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def settings_to_config(s: dict) -> engine.SimConfig:
    l1 = s["l1"] if s["l1"] is not None else 0.1
    rates = (l1,) if s["l2"] is None else (l1, s["l2"])
    momentum = s["momentum"] or ("classic" if s["ro_momentum"] else "none")
    hyper = alg.HyperParams(
        eps=s["eps"], mu=s["mu"], grad_rates=rates,
        beta_self=s["beta_self"], mewma_rho=s["ro"],
        momentum=momentum,
        momentum_decay=s["ro_momentum"] or 0.0,
        batch_size=s["B"], quantize_bits=s["quantize_bits"],
        quantize_numerics=bool(s["quantize_numerics"]))
    alternate = ()
    if s["alternate"]:
        alternate = tuple(int(x) for x in str(s["alternate"]).split(",") if x != "")
    return engine.SimConfig(
        algo=s["algo"], model=s["model"], K=s["K"], degree=s["N"],
        rounds=s["T"], topology=s["topology"], partition=s["partition"],
        hyper=hyper, train_data=s["dataset"], val_data=s["valset"],
        seed=s["seed"], mu_server=s["mu_s"], alternate=alternate,
        val_stride=s["val_stride"], workers=s["workers"],
        measure_time=bool(s["measure_time"]))


def validate_settings(s: dict, parser: argparse.ArgumentParser) -> None:
    if s["algo"] in ("cfa", "cfa-ge") and s["N"] < 1 and s["topology"] == "kregular":
        parser.error(f"{s['algo']} needs at least one neighbor per device; "
                     "got -N 0")
    if s["T"] < 1:
        parser.error("-T must be at least 1")


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_run(args, parser) -> int:
    settings = merge_settings(args)
    validate_settings(settings, parser)
    config = settings_to_config(settings)
    try:
        result = engine.run(config)
    except engine.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, nn.ShapeError, ds.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = settings["out"]
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        engine.write_metrics_csv(result.metrics, out / "metrics.csv")
        for k, model in result.models.items():
            nn.save_checkpoint(model, out / f"model_node{k}.flw")
        if getattr(args, "plot", False):
            _render_plot(result, out / "loss_curves.png")
        print(f"wrote {out / 'metrics.csv'}")
    _print_summary(result)
    return EXIT_OK


def _print_summary(result: engine.SimResult) -> None:
    last_round = max(m.round for m in result.metrics)
    finals = [m for m in result.metrics if m.round == last_round]
    losses = [m.val_loss for m in finals]
    accs = [m.val_acc for m in finals]
    total_bytes = sum(m.cum_tx_bytes for m in finals)
    print(f"{result.config.algo} / {result.config.model}: round {last_round}, "
          f"val loss mean {sum(losses) / len(losses):.4f} "
          f"(min {min(losses):.4f}, max {max(losses):.4f}), "
          f"val acc mean {sum(accs) / len(accs):.4f}, "
          f"total transmitted {total_bytes / 1000:.2f} KB")


def _render_plot(result: engine.SimResult, path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; skipping plot", file=sys.stderr)
        return
    by_node: dict[int, list[tuple[int, float]]] = {}
    for m in result.metrics:
        by_node.setdefault(m.node, []).append((m.round, m.val_loss))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for node, points in sorted(by_node.items()):
        xs, ys = zip(*sorted(points))
        ax.plot(xs, ys, label=f"node {node}", linewidth=1)
    ax.set_xlabel("communication round")
    ax.set_ylabel("validation loss")
    ax.set_title(f"{result.config.algo} / {result.config.model}")
    if len(by_node) <= 12:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _cmd_synth(args) -> int:
    kwargs = {}
    if args.classes is not None:
        kwargs["C"] = args.classes
    if args.dim is not None:
        kwargs["dim"] = args.dim
    if args.kind == "radar":
        if args.noise is not None:
            kwargs["noise"] = args.noise
        dataset = ds.synth_radar(args.seed, args.n, **kwargs)
    else:
        if args.noise is not None:
            kwargs["noise"] = args.noise
        dataset = ds.synth_digits(args.seed, args.n, **kwargs)
    ds.save_native(dataset, args.out)
    print(f"wrote {args.out}: {len(dataset)} examples, dim "
          f"{dataset.feature_dim}, {dataset.num_classes} classes")
    return EXIT_OK


def _cmd_convert_check(args) -> int:
    try:
        dataset = ds.load_native(args.path)
    except (OSError, ds.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    counts = {c: int((dataset.labels == c).sum()) for c in range(dataset.num_classes)}
    print(f"{args.path}: {len(dataset)} examples, dim {dataset.feature_dim}, "
          f"{dataset.num_classes} classes")
    print("per-class counts:", counts)
    return EXIT_OK


def _cmd_bench_overhead(args) -> int:
    bits = args.bits
    print(f"bytes per round per device ({bits}-bit payloads)")
    print(f"{'neighbors':>9}  {'method':<7} {'cnn':>10} {'2nn':>10}")
    for degree in (2, 6, 10):
        for algo in ("fa", "cfa", "cfa-ge"):
            row = [engine.overhead_bytes(algo, model, degree, bits)
                   for model in ("cnn", "2nn")]
            print(f"{degree:>9}  {algo:<7} {row[0]:>10} {row[1]:>10}"
                  f"   ({row[0] / 1000:.2f} KB / {row[1] / 1000:.2f} KB)")
    return EXIT_OK


def _grid_points(grid_specs: list[str]) -> list[dict]:
    """Expand repeated KEY=V1,V2 axes into the cross product."""
    axes: list[tuple[str, list[str]]] = []
    for spec in grid_specs:
        key, sep, values = spec.partition("=")
        key = key.strip()
        if not sep or key not in CONFIG_KEYS and key not in ("momentum",):
            raise ValueError(f"bad grid axis {spec!r}")
        axes.append((key, [v.strip() for v in values.split(",") if v.strip()]))
    points = [{}]
    for key, values in axes:
        points = [dict(p, **{key: _coerce(key, v)}) for p in points for v in values]
    return points


def _sweep_one(payload) -> dict:
    settings, target = payload
    row = {k: settings[k] for k in settings.pop("_grid_keys")}
    try:
        result = engine.run(settings_to_config(settings))
    except Exception as exc:  # a failed point must not poison the sweep
        row.update(status="failed", error=str(exc)[:120], final_loss_mean="",
                   final_loss_max="", rounds_min="", rounds_max="")
        return row
    last_round = max(m.round for m in result.metrics)
    finals = [m.val_loss for m in result.metrics if m.round == last_round]
    reach = engine.rounds_to_target(result.metrics, target)
    row.update(status="ok", error="",
               final_loss_mean=f"{sum(finals) / len(finals):.6f}",
               final_loss_max=f"{max(finals):.6f}",
               rounds_min="" if reach.min_rounds is None else reach.min_rounds,
               rounds_max="" if reach.max_rounds is None else reach.max_rounds)
    return row


def _cmd_sweep(args, parser) -> int:
    base = merge_settings(args)
    validate_settings(base, parser)
    try:
        points = _grid_points(args.grid)
    except ValueError as exc:
        parser.error(str(exc))

    jobs = []
    seen = set()
    for point in points:
        settings = dict(base, **point)
        digest = hashlib.sha256(
            repr(sorted((k, settings[k]) for k in settings)).encode()).hexdigest()
        if digest in seen:
            continue
        seen.add(digest)
        settings["_grid_keys"] = sorted(point)
        jobs.append((settings, args.target))

    limit = int(os.environ.get("FLSIM_WORKERS", "1"))
    if limit > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(limit, len(jobs))) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(job) for job in jobs]

    grid_keys = sorted({k for row in rows for k in row
                        if k not in ("status", "error", "final_loss_mean",
                                     "final_loss_max", "rounds_min", "rounds_max")})
    header = grid_keys + ["status", "final_loss_mean", "final_loss_max",
                          "rounds_min", "rounds_max", "error"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([row.get(k, "") for k in header])
    text = buf.getvalue()
    if base["out"]:
        out = Path(base["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(text)
        print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args, parser)
    if args.command == "synth":
        return _cmd_synth(args)
    if args.command == "convert-check":
        return _cmd_convert_check(args)
    if args.command == "bench-overhead":
        return _cmd_bench_overhead(args)
    if args.command == "sweep":
        return _cmd_sweep(args, parser)
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
