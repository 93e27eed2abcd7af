"""Command-line surface: dataset generation, training, evaluation reports.

Every command writes a JSON run manifest next to its outputs with the
effective configuration, seeds, input/output checksums and wall-clock time,
sufficient to reproduce the run. Exit codes: 0 success, 2 argument error,
3 data or schema error, 4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import calibration, toymc, training, truth
from .model import (
    BundleArch,
    DirectionArch,
    GenerativeArch,
    LatentArch,
    ModelBundle,
    PosteriorArch,
)
from .special import ConvergenceError
from .toymc import SchemaError

MANIFEST_VERSION = 1


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs, outputs,
                   started: float) -> Path:
    """Atomically written record that reproduces the run."""
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "wall_clock_s": time.time() - started,
    }
    path = Path(out_dir) / f"manifest_{command.replace(' ', '_')}.json"
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)
    return path


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _effective(args, key, file_cfg, default):
    """Precedence: explicit flag > config file > built-in default."""
    val = getattr(args, key)
    if val is not None:
        return val
    if key in file_cfg:
        return file_cfg[key]
    return default


# -- gen -------------------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.time()
    cfgf = _load_config_file(args.config)
    dataset = _effective(args, "dataset", cfgf, None)
    n = _effective(args, "n", cfgf, None)
    if dataset is None or n is None:
        raise ValueError("gen requires --dataset and --n")
    seed = _effective(args, "seed", cfgf, 0)
    marginalize = bool(args.marginalize or cfgf.get("marginalize", False))
    threads = _effective(args, "threads", cfgf, 1)
    out = Path(args.out)
    events = toymc.generate_dataset(dataset, n, seed, marginalize=marginalize,
                                    threads=threads)
    config = toymc.build_detector(dataset)
    if marginalize:
        config = toymc.DetectorConfig(
            **{**config.__dict__, "systematics": toymc.SystematicsSpec(0.5)})
    out.parent.mkdir(parents=True, exist_ok=True)
    toymc.write_dataset(out, events, dataset_id=dataset, seed=seed,
                        marginalize=marginalize, config=config)
    snapshot = {"dataset": dataset, "n": n, "seed": seed,
                "marginalize": marginalize, "threads": threads}
    write_manifest(out.parent, "gen", snapshot, [], [out], started)
    print(f"wrote {n} events to {out}")
    return 0


# -- train -----------------------------------------------------------------------

def _arch_for_training(args, header, events, file_cfg) -> BundleArch:
    mode = args.mode
    flow = _effective(args, "flow", file_cfg, "gf")
    layers = _effective(args, "layers", file_cfg, 5)
    kernels = _effective(args, "kernels", file_cfg, 5)
    width = _effective(args, "mlp_width", file_cfg, 50)
    has_direction = any(ev.label is not None and ev.label.direction is not None
                        for ev in events)
    posterior = PosteriorArch(kind=flow, dim=2, layers=layers, kernels=kernels,
                              mlp_width=width)
    direction = (DirectionArch(blocks=_effective(args, "dir_blocks", file_cfg, 1),
                               kernels=8, mlp_width=width)
                 if has_direction and mode != "vae" else None)
    latent_dim = _effective(args, "latent_dim", file_cfg, 0)
    latent = LatentArch(dim=latent_dim, mlp_width=width) if latent_dim > 0 else None
    generative = (GenerativeArch(dec_width=_effective(args, "dec_width", file_cfg, 100))
                  if mode in ("extended", "semi", "vae") else None)
    if mode == "vae":
        direction = None
        latent = None
    return BundleArch(posterior=posterior, direction=direction,
                      latent=latent, generative=generative)


def cmd_train(args) -> int:
    started = time.time()
    cfgf = _load_config_file(args.config)
    data_path = Path(args.data)
    header, det_config, events = toymc.read_dataset(data_path)
    if args.mode in ("supervised", "extended") and any(ev.label is None for ev in events):
        raise SchemaError(f"mode {args.mode!r} needs fully labeled data")
    if args.init_model:
        bundle = ModelBundle.load(args.init_model)
        if args.mode in ("extended", "semi", "vae") and bundle.arch.generative is None:
            # add-on workflow: extend a supervised checkpoint with generative
            # parts, keeping the trained encoder/posterior slots bit for bit
            latent_dim = _effective(args, "latent_dim", cfgf, 0)
            new_arch = BundleArch(
                encoder=bundle.arch.encoder,
                posterior=bundle.arch.posterior,
                direction=bundle.arch.direction,
                latent=LatentArch(dim=latent_dim,
                                  mlp_width=bundle.arch.posterior.mlp_width)
                if latent_dim > 0 else None,
                generative=GenerativeArch(
                    dec_width=_effective(args, "dec_width", cfgf, 100)))
            extended = ModelBundle.build(new_arch, bundle.config,
                                         seed=_effective(args, "model_seed", cfgf, 1))
            for name in bundle.params.layout:
                if name in extended.params.layout:
                    extended.params.view(name)[...] = bundle.params.view(name)
            bundle = extended
    else:
        arch = _arch_for_training(args, header, events, cfgf)
        bundle = ModelBundle.build(arch, det_config,
                                   seed=_effective(args, "model_seed", cfgf, 1))
    cfg = training.TrainConfig(
        batch_size=_effective(args, "batch_size", cfgf, 128),
        lr=_effective(args, "lr", cfgf, 1e-2),
        fisher_decay=_effective(args, "fisher_decay", cfgf, 0.999),
        mean_decay=_effective(args, "mean_decay", cfgf, 0.9),
        max_epochs=_effective(args, "epochs", cfgf, 30),
        seed=_effective(args, "seed", cfgf, 0),
    )
    out_model = Path(args.out)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out_model.with_suffix(".log.csv")
    training.train(bundle, events, cfg, mode=args.mode,
                   freeze_posterior=args.freeze_posterior, log_path=log_path,
                   progress=args.progress)
    bundle.save(out_model)
    snapshot = {"mode": args.mode, "data": str(data_path),
                "train_config": cfg.__dict__ | {"lr_adapt": cfg.lr_adapt.__dict__,
                                                "swa": cfg.swa.__dict__},
                "architecture": bundle.arch.to_dict(),
                "freeze_posterior": args.freeze_posterior}
    write_manifest(out_model.parent, "train", snapshot, [data_path],
                   [out_model, log_path], started)
    print(f"trained {args.mode} model -> {out_model}")
    return 0


# -- eval ------------------------------------------------------------------------

def cmd_eval_coverage(args) -> int:
    started = time.time()
    bundle = ModelBundle.load(args.model)
    _, _, events = toymc.read_dataset(args.data)
    if args.max_events:
        events = events[:args.max_events]
    levels = calibration.DEFAULT_LEVELS
    report = calibration.coverage_curve(bundle, events, levels)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "coverage.csv"
    report.to_csv(csv_path)
    outputs = [csv_path]
    if args.svg:
        svg_path = out_dir / "coverage.svg"
        calibration.coverage_svg(report, svg_path)
        outputs.append(svg_path)
    write_manifest(out_dir, "eval coverage",
                   {"model": args.model, "data": args.data,
                    "n_events": len(events), "n_failed": report.n_failed},
                   [args.model, args.data], outputs, started)
    print(f"coverage over {report.n_events} events: max deviation "
          f"{report.max_deviation():.4f} ({report.n_failed} inversion failures)")
    return 0


def cmd_eval_gof(args) -> int:
    started = time.time()
    bundle = ModelBundle.load(args.model)
    if bundle.arch.generative is None:
        raise SchemaError("goodness-of-fit needs a model with a generative part")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    outputs = []
    for path in args.datasets:
        _, _, events = toymc.read_dataset(path)
        if args.max_events:
            events = events[:args.max_events]
        name = Path(path).stem
        reports[name] = calibration.run_gof(bundle, events, args.n_sim, args.seed,
                                            threads=args.threads)
        csv_path = out_dir / f"gof_{name}.csv"
        reports[name].to_csv(csv_path)
        outputs.append(csv_path)
        print(f"{name}: median p = {float(np.median(reports[name].p_values)):.3f}, "
              f"frac(p<0.05) = {reports[name].low_fraction():.3f}")
    hist = calibration.pvalue_histograms(reports)
    hist_path = out_dir / "gof_hist.csv"
    calibration.write_histogram_csv(hist, hist_path)
    outputs.append(hist_path)
    if args.svg:
        svg_path = out_dir / "gof_hist.svg"
        calibration.pvalue_hist_svg(hist, svg_path)
        outputs.append(svg_path)
    write_manifest(out_dir, "eval gof",
                   {"model": args.model, "datasets": list(args.datasets),
                    "n_sim": args.n_sim, "seed": args.seed},
                   [args.model, *args.datasets], outputs, started)
    return 0


def cmd_eval_kl(args) -> int:
    started = time.time()
    bundle = ModelBundle.load(args.model)
    _, det_config, events = toymc.read_dataset(args.data)
    if args.max_events:
        events = events[:args.max_events]
    axes = truth.default_axes(args.grid)
    kl = float(truth.sample_kl_to_truth(bundle.log_prob_event, events, det_config, axes))
    val_loss = float(training.supervised_loss(bundle, events, want_grad=False)[0])
    true_loss = float(truth.true_posterior_loss(events, det_config, axes))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "kl.csv"
    with open(csv_path, "w") as fh:
        fh.write("sample_kl,model_loss,true_posterior_loss,n_events\n")
        fh.write(f"{kl!r},{val_loss!r},{true_loss!r},{len(events)}\n")
    write_manifest(out_dir, "eval kl",
                   {"model": args.model, "data": args.data, "grid": args.grid,
                    "n_events": len(events)},
                   [args.model, args.data], [csv_path], started)
    print(f"sample KL to truth: {kl:.4f} (model loss {val_loss:.4f}, "
          f"true-posterior loss {true_loss:.4f})")
    return 0


def cmd_eval_scan(args) -> int:
    started = time.time()
    bundle = ModelBundle.load(args.model)
    _, det_config, events = toymc.read_dataset(args.data)
    if not (0 <= args.event_index < len(events)):
        raise ValueError(f"event index {args.event_index} outside the dataset")
    event = events[args.event_index]
    axes = truth.default_axes(args.grid)
    grid = truth.posterior_grid(event, det_config, axes)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    true_path = out_dir / f"true_posterior_{args.event_index}.csv"
    grid.to_csv(true_path)
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    lp = bundle.position_log_prob_scan(event, pts).reshape(X.shape)
    flow_path = out_dir / f"flow_posterior_{args.event_index}.csv"
    truth.write_grid_csv(axes, lp, flow_path, grid.cell_volume)
    write_manifest(out_dir, "eval scan",
                   {"model": args.model, "data": args.data,
                    "event_index": args.event_index, "grid": args.grid},
                   [args.model, args.data], [true_path, flow_path], started)
    print(f"wrote posterior scans for event {args.event_index} to {out_dir}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowreco",
        description="Flow-based event reconstruction: generation, training, "
                    "coverage and goodness-of-fit evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a toy dataset file")
    p_gen.add_argument("--dataset", type=int, choices=range(1, 6), default=None)
    p_gen.add_argument("--n", type=int, default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--marginalize", action="store_true")
    p_gen.add_argument("--threads", type=int, default=None)
    p_gen.add_argument("--config", default=None, help="JSON file with defaults")
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a model on a dataset file")
    p_train.add_argument("--mode", choices=("supervised", "extended", "semi", "vae"),
                         default="supervised")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--log", default=None)
    p_train.add_argument("--flow", choices=("gf", "affine", "mse"), default=None)
    p_train.add_argument("--layers", type=int, default=None)
    p_train.add_argument("--kernels", type=int, default=None)
    p_train.add_argument("--mlp-width", dest="mlp_width", type=int, default=None)
    p_train.add_argument("--dec-width", dest="dec_width", type=int, default=None)
    p_train.add_argument("--dir-blocks", dest="dir_blocks", type=int, default=None)
    p_train.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--fisher-decay", dest="fisher_decay", type=float, default=None)
    p_train.add_argument("--mean-decay", dest="mean_decay", type=float, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--model-seed", dest="model_seed", type=int, default=None)
    p_train.add_argument("--init-model", default=None,
                         help="start from an existing model file")
    p_train.add_argument("--freeze-posterior", action="store_true")
    p_train.add_argument("--progress", action="store_true")
    p_train.add_argument("--config", default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluation reports")
    eval_sub = p_eval.add_subparsers(dest="kind", required=True)

    p_cov = eval_sub.add_parser("coverage")
    p_cov.add_argument("--model", required=True)
    p_cov.add_argument("--data", required=True)
    p_cov.add_argument("--out-dir", required=True)
    p_cov.add_argument("--max-events", type=int, default=None)
    p_cov.add_argument("--svg", action="store_true")
    p_cov.set_defaults(func=cmd_eval_coverage)

    p_gof = eval_sub.add_parser("gof")
    p_gof.add_argument("--model", required=True)
    p_gof.add_argument("--datasets", nargs="+", required=True)
    p_gof.add_argument("--out-dir", required=True)
    p_gof.add_argument("--n-sim", dest="n_sim", type=int, default=500)
    p_gof.add_argument("--seed", type=int, default=0)
    p_gof.add_argument("--max-events", type=int, default=None)
    p_gof.add_argument("--threads", type=int, default=1)
    p_gof.add_argument("--svg", action="store_true")
    p_gof.set_defaults(func=cmd_eval_gof)

    p_kl = eval_sub.add_parser("kl")
    p_kl.add_argument("--model", required=True)
    p_kl.add_argument("--data", required=True)
    p_kl.add_argument("--out-dir", required=True)
    p_kl.add_argument("--grid", type=int, default=200)
    p_kl.add_argument("--max-events", type=int, default=None)
    p_kl.set_defaults(func=cmd_eval_kl)

    p_scan = eval_sub.add_parser("scan")
    p_scan.add_argument("--model", required=True)
    p_scan.add_argument("--data", required=True)
    p_scan.add_argument("--out-dir", required=True)
    p_scan.add_argument("--event-index", dest="event_index", type=int, required=True)
    p_scan.add_argument("--grid", type=int, default=200)
    p_scan.set_defaults(func=cmd_eval_scan)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ConvergenceError as exc:
        print(f"numerical non-convergence: {exc}", file=sys.stderr)
        return 4
    except (ValueError, FileNotFoundError) as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
