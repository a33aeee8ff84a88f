"""Command-line interface: ``regflow {gen,train,eval,density-grid,sample}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    CoverageError,
    GroundTruth,
    ToyConfig,
    config_from_text,
    gen_toy,
    gen_traj2d,
    load_dataset,
    save_dataset,
)
from .flow import FlowConfig
from .hypernet import HyperNetwork, Standardizer
from .mdn import MdnModel
from .trainer import (
    METRICS,
    REFERENCE_LEARNING_RATE,
    TrainConfig,
    TrainingAborted,
    checkpoint_name,
    evaluate,
    train,
    write_report,
)

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
MAX_GRID_RES = 1024


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(path: Path, command: str, config_path, resolved: dict, seeds: dict, output, start: str,
                    status: str = "ok", **extra) -> None:
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config": resolved,
        "seeds": seeds,
        "output": str(output),
        "start": start,
        "end": _now(),
        "status": status,
        "code_version": f"regflow {__version__}",
    }
    manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


# --- gen --------------------------------------------------------------------


def _generator_config(cfg: RunConfig, n: int):
    gen = cfg.str("generator", "toy")
    fields = {k: v for k, v in cfg.raw().items()
              if k in ("x_range", "branches", "noise_sigma", "mode_centers", "mode_weights", "start_box")}
    fields["n_samples"] = str(n)
    for k in fields:
        cfg.used.add(k)
    if gen not in ("toy", "traj2d"):
        raise cfg.error("generator", f"unknown generator {gen!r}; expected toy or traj2d")
    try:
        return gen, config_from_text(gen, fields)
    except CoverageError as exc:
        raise cfg.error("branches", str(exc)) from None
    except (ValueError, TypeError) as exc:
        bad = next((k for k in fields if k != "n_samples"), "generator")
        raise cfg.error(bad, str(exc)) from None


def cmd_gen(args) -> int:
    start = _now()
    cfg = RunConfig.load(args.config)
    seed = args.seed if args.seed is not None else cfg.int("seed", 0)
    n_train = cfg.int("n_train", 1000)
    n_test = cfg.int("n_test", 1000)
    gen, gcfg = _generator_config(cfg, n_train)
    _, gcfg_test = _generator_config(cfg, n_test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    make = gen_toy if gen == "toy" else gen_traj2d
    train_ds = make(gcfg, seed, "train")
    test_ds = make(gcfg_test, seed, "test")
    save_dataset(train_ds, out / "train.csv")
    save_dataset(test_ds, out / "test.csv")
    if not args.no_figures:
        from .plotting import plot_dataset

        plot_dataset(train_ds, out / "train.png")
    resolved = {**cfg.raw(), "generator": gen, "n_train": n_train, "n_test": n_test}
    _write_manifest(out / "manifest.json", "gen", args.config, resolved, {"seed": seed}, out, start)
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test pairs to {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------


def _load_split(data_dir, split: str):
    path = Path(data_dir) / f"{split}.csv"
    if not path.exists():
        raise InputError(f"missing dataset file {path}")
    ds = load_dataset(path)
    ds.split = split
    return ds


def build_model(kind: str, cfg: RunConfig, train_ds):
    init_seed = cfg.int("init_seed", 0)
    st = Standardizer.fit(train_ds.x, train_ds.y) if cfg.bool("standardize", True) else None
    c, d = train_ds.cond_dim, train_ds.target_dim
    if kind == "regflow":
        try:
            fc = FlowConfig(
                target_dim=d,
                hidden_widths=cfg.ints("flow_widths", (32,)),
                t0=cfg.float("t0", 0.0),
                t1=cfg.float("t1", 1.0),
                rk4_steps=cfg.int("rk4_steps", 20),
            )
        except ValueError as exc:
            raise cfg.error("flow_widths", str(exc)) from None
        return HyperNetwork(c, fc, hidden_widths=cfg.ints("hyper_widths", (64, 64)),
                            output_scale=cfg.float("output_scale", 1e-2), seed=init_seed, standardizer=st)
    k = cfg.int("k", 8)
    if k < 1:
        raise cfg.error("k", "k must be >= 1")
    return MdnModel(c, d, k, hidden_widths=cfg.ints("mdn_widths", (64, 64)), seed=init_seed, standardizer=st)


def train_config(cfg: RunConfig, seed_override=None) -> TrainConfig:
    lr = REFERENCE_LEARNING_RATE if cfg.bool("reference_lr", False) else cfg.float("learning_rate", 1e-3)
    try:
        return TrainConfig(
            learning_rate=lr,
            batch_size=cfg.int("batch_size", 64),
            max_steps=cfg.int("max_steps", 5000),
            eval_every=cfg.int("eval_every", 500),
            seed=seed_override if seed_override is not None else cfg.int("seed", 0),
            adam_beta1=cfg.float("adam_beta1", 0.9),
            adam_beta2=cfg.float("adam_beta2", 0.999),
            adam_eps=cfg.float("adam_eps", 1e-8),
            grad_clip_norm=cfg.optional_float("grad_clip_norm", 10.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), source=cfg.source) from None


def cmd_train(args) -> int:
    start = _now()
    cfg = RunConfig.load(args.config) if args.config else RunConfig({}, source="defaults")
    train_ds = _load_split(args.data, "train")
    test_path = Path(args.data) / "test.csv"
    test_ds = _load_split(args.data, "test") if test_path.exists() else None
    model = build_model(args.model, cfg, train_ds)
    tcfg = train_config(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg.raw(), **{k: getattr(tcfg, k) for k in tcfg.__dataclass_fields__}, "model": args.model}
    seeds = {"train_seed": tcfg.seed, "init_seed": cfg.int("init_seed", 0)}
    try:
        model, log = train(model, train_ds, tcfg, out_dir=out, test=test_ds)
    except TrainingAborted as exc:
        exc.log.write(out / "train_log.csv")
        _write_manifest(out / "manifest.json", "train", args.config, resolved, seeds, out, start,
                        status="aborted", aborted_step=exc.step, reason=str(exc),
                        partial_checkpoint=str(exc.checkpoint))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.write(out / "train_log.csv")
    if not args.no_figures:
        from .plotting import plot_training_curve

        plot_training_curve(log, out / "train_curve.png")
    _write_manifest(out / "manifest.json", "train", args.config, resolved, seeds, out, start,
                    checkpoint=str(out / checkpoint_name(model)))
    print(f"trained {args.model} for {len(log.steps)} steps; checkpoint {out / checkpoint_name(model)}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------


def _load_model(spec: str, dataset=None):
    if spec == "truth":
        if dataset is None or dataset.config is None:
            raise InputError("--checkpoint truth needs a dataset with generator metadata")
        return GroundTruth(dataset.config)
    path = Path(spec)
    if not path.exists():
        raise InputError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise InputError(f"{path}: {exc}") from None


def _conditional_density_figure(model, ds, path) -> None:
    from .plotting import plot_conditional_density

    cfg = ds.config
    xs = np.linspace(cfg.x_range[0], cfg.x_range[1], 81)
    pad = 0.1 * (ds.y.max() - ds.y.min())
    ys = np.linspace(ds.y.min() - pad, ds.y.max() + pad, 241)
    dens = np.array([np.exp(model.log_prob_grid(np.array([x]), ys[:, None])) for x in xs])
    plot_conditional_density(xs, ys, dens, path, title=f"p(y|x), {model.kind}")


def cmd_eval(args) -> int:
    start = _now()
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in METRICS]
    if unknown or not metrics:
        raise InputError(f"unknown metric(s) {unknown or metrics}; valid names: {', '.join(METRICS)}")
    test_ds = _load_split(args.data, "test")
    model = _load_model(args.checkpoint, test_ds)
    if model.kind != "truth" and (model.cond_dim, model.target_dim) != (test_ds.cond_dim, test_ds.target_dim):
        raise InputError("checkpoint dimensions do not match the dataset")
    if any(m in ("emd", "demd") for m in metrics) and test_ds.config is None:
        raise InputError("emd/demd need a dataset with generator metadata (.meta.txt)")
    rows = evaluate(model, test_ds, metrics, n_samples=args.n_samples, seed=args.seed,
                    demd_seeds=args.demd_seeds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(rows, out)
    if not args.no_figures and model.kind != "truth" and isinstance(test_ds.config, ToyConfig):
        _conditional_density_figure(model, test_ds, out.with_name(out.stem + "_density.png"))
    _write_manifest(out.with_name(out.name + ".manifest.json"), "eval", None,
                    {"metrics": metrics, "checkpoint": args.checkpoint, "data": args.data,
                     "n_samples": args.n_samples, "demd_seeds": args.demd_seeds},
                    {"seed": args.seed}, out, start)
    for r in rows:
        print(f"{r.metric}\t{r.value:.6g}\t±{r.stddev:.3g}")
    return EXIT_OK


# --- density-grid -----------------------------------------------------------


def parse_grid(text: str, target_dim: int):
    vals = _floats(text, "grid")
    need = 3 if target_dim == 1 else 5
    if len(vals) != need:
        form = "YMIN,YMAX,RES" if target_dim == 1 else "XMIN,XMAX,YMIN,YMAX,RES"
        raise InputError(f"--grid: a {target_dim}-d model needs {form}")
    res = vals[-1]
    if res != int(res) or res < 1:
        raise InputError(f"--grid: resolution must be a positive integer, got {res:g}")
    if res > MAX_GRID_RES:
        raise InputError(f"--grid: resolution {int(res)} exceeds the limit of {MAX_GRID_RES} per axis")
    bounds = vals[:-1]
    if any(hi <= lo for lo, hi in zip(bounds[::2], bounds[1::2])):
        raise InputError("--grid: each max must exceed its min")
    return bounds, int(res)


def density_grid(model, x, bounds, res: int):
    """Density at cell centres: ``(res,)`` for d=1, ``(res, res)`` rows along y1 for d=2."""
    centers = [lo + (np.arange(res) + 0.5) * (hi - lo) / res for lo, hi in zip(bounds[::2], bounds[1::2])]
    if len(centers) == 1:
        return centers, np.exp(model.log_prob_grid(x, centers[0][:, None]))
    g0, g1 = np.meshgrid(centers[0], centers[1])
    pts = np.column_stack([g0.ravel(), g1.ravel()])
    dens = np.concatenate([np.exp(model.log_prob_grid(x, pts[i:i + 8192])) for i in range(0, len(pts), 8192)])
    return centers, dens.reshape(res, res)


def write_pgm(density, path, comment: str = "") -> None:
    """ASCII portable graymap (P2), max-normalized to 0..255, top row = largest y."""
    img = np.atleast_2d(density)[::-1]
    top = img.max()
    levels = np.rint(255.0 * img / top).astype(int) if top > 0 else np.zeros(img.shape, dtype=int)
    lines = ["P2"]
    if comment:
        lines.append(f"# {comment}")
    lines += [f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_density_grid(args) -> int:
    start = _now()
    model = _load_model(args.checkpoint)
    x = np.array(_floats(args.x, "x"))
    if x.size != model.cond_dim:
        raise InputError(f"--x has {x.size} values, model expects {model.cond_dim}")
    if model.target_dim > 2:
        raise InputError("density-grid supports 1-d and 2-d targets")
    bounds, res = parse_grid(args.grid, model.target_dim)
    centers, dens = density_grid(model, x, bounds, res)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(dens, out, comment=f"regflow density x={args.x} grid={args.grid}")
    csv_path = out.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if model.target_dim == 1:
            w.writerow(["y0", "density"])
            for c, v in zip(centers[0], dens):
                w.writerow([format(c, ".17g"), format(v, ".17g")])
        else:
            w.writerow(["y0", "y1", "density"])
            for i, c1 in enumerate(centers[1]):
                for j, c0 in enumerate(centers[0]):
                    w.writerow([format(c0, ".17g"), format(c1, ".17g"), format(dens[i, j], ".17g")])
    if not args.no_figures:
        from .plotting import plot_density_grid

        plot_density_grid(dens, bounds, out.with_suffix(".png"), title=f"x = {args.x}")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "density-grid", None,
                    {"checkpoint": args.checkpoint, "x": args.x, "grid": args.grid}, {}, out, start)
    print(f"wrote {out} and {csv_path}")
    return EXIT_OK


# --- sample -----------------------------------------------------------------


def cmd_sample(args) -> int:
    start = _now()
    model = _load_model(args.checkpoint)
    x = np.array(_floats(args.x, "x"))
    if x.size != model.cond_dim:
        raise InputError(f"--x has {x.size} values, model expects {model.cond_dim}")
    if args.n < 1:
        raise InputError("--n must be >= 1")
    samples = model.sample(x, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = [f"y{i}" for i in range(samples.shape[1])]
    out.write_text(",".join(header) + "\n" + "".join(",".join(format(v, ".17g") for v in row) + "\n"
                                                     for row in samples))
    if not args.no_figures:
        from .plotting import plot_samples

        plot_samples(samples, out.with_suffix(".png"), title=f"x = {args.x}")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "sample", None,
                    {"checkpoint": args.checkpoint, "x": args.x, "n": args.n}, {"seed": args.seed}, out, start)
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regflow", description="Conditional density estimation with hypernetwork CNFs.")
    p.add_argument("--version", action="version", version=f"regflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--no-figures", action="store_true", help="skip matplotlib output")

    g = sub.add_parser("gen", help="generate train/test datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", choices=("regflow", "mdn"), default="regflow")
    t.add_argument("--data", required=True, help="directory holding train.csv (and test.csv)")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True, help="checkpoint file, or 'truth' for the generator")
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default="nll")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-samples", type=int, default=256)
    e.add_argument("--demd-seeds", type=int, default=10)
    common(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("density-grid", help="density heatmap for one input")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--x", required=True)
    d.add_argument("--grid", required=True, help="XMIN,XMAX,YMIN,YMAX,RES (2-d) or YMIN,YMAX,RES (1-d)")
    d.add_argument("--out", required=True)
    common(d)
    d.set_defaults(func=cmd_density_grid)

    s = sub.add_parser("sample", help="draw samples for one input")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--x", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError, CoverageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
