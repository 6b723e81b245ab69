"""Command-line entry point: ``arpm <command> [flags]``.

Exit codes: 0 on success, 1 for bad flags or bad config (one JSON line on
stderr), 2 for failures while running. Files a failed command created are
removed before it exits.
"""

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .adapt_ext import OpenSetTrainer, open_set_scores, stream_accuracy, stream_tpm
from .losses import alpha_power_surface, simplex_grid, two_class_gradient
from .nets import load_checkpoint, save_checkpoint
from .reweight import class_weight_summary, read_weight_report, write_weight_report
from .scenario import (ScenarioSpec, accuracy, empirical_margin, empirical_robustness, generate,
                       read_dataset_csv, write_dataset_csv)
from .trainer import Trainer, TrainConfig, cell_name, summary_row, train, write_summary_csv

ABLATION_CELLS = {
    "SO": dict(use_reweight=False, use_nrc=False, uncertainty=None),
    "SO+E": dict(use_reweight=False, use_nrc=False, uncertainty="entropy"),
    "SO+P": dict(use_reweight=False, use_nrc=False, uncertainty="alpha_power"),
    "SO+R+P": dict(use_reweight=True, use_nrc=False, uncertainty="alpha_power"),
    "SO+R+N": dict(use_reweight=True, use_nrc=True, uncertainty=None),
    "SO+N+P": dict(use_reweight=False, use_nrc=True, uncertainty="alpha_power"),
    "SO+R+N+E": dict(use_reweight=True, use_nrc=True, uncertainty="entropy"),
    "SO+R+N+P": dict(use_reweight=True, use_nrc=True, uncertainty="alpha_power"),
}
DEFAULT_CELLS = ("SO", "SO+P", "SO+R+P", "SO+R+N", "SO+N+P", "SO+R+N+P")

# TrainConfig fields settable by a flag of the same name
OVERRIDES = ("kappa", "lam", "rho", "alpha", "K", "M", "N", "tau", "lam_prime", "threshold",
             "total_steps", "disc_steps", "batch_size", "eval_every", "sampler_mode", "uncertainty")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def ablation_config(base, cell):
    if cell not in ABLATION_CELLS:
        raise UsageError(f"unknown ablation cell {cell!r}; known: {sorted(ABLATION_CELLS)}")
    spec = ABLATION_CELLS[cell]
    kw = dict(use_reweight=spec["use_reweight"], use_nrc=spec["use_nrc"])
    if spec["uncertainty"] is None:
        kw["lam"] = 0.0
    else:
        kw["uncertainty"] = spec["uncertainty"]
        if base.lam == 0:
            kw["lam"] = TrainConfig.lam
    return replace(base, **kw)


# argument handling

def _add_config_flags(p):
    p.add_argument("--config", help="JSON file with config fields")
    p.add_argument("--seed", type=int)
    g = p.add_argument_group("overrides")
    g.add_argument("--kappa", type=float)
    g.add_argument("--lam", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--K", type=int)
    g.add_argument("--M", type=int)
    g.add_argument("--N", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--lam-prime", type=float)
    g.add_argument("--threshold", type=float)
    g.add_argument("--total-steps", type=int)
    g.add_argument("--disc-steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--sampler-mode", choices=["auto", "weighted_loss", "weighted_sampler"])
    g.add_argument("--uncertainty", choices=["alpha_power", "entropy", "tsallis", "square"])
    g.add_argument("--no-reweight", action="store_true")
    g.add_argument("--no-nrc", action="store_true")


def _add_data_flags(p):
    p.add_argument("--data", help="directory holding source.csv and target.csv")
    p.add_argument("--source", help="source dataset CSV")
    p.add_argument("--target", help="target dataset CSV")


def build_parser():
    parser = _Parser(prog="arpm", description="Adversarial reweighting with power maximization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scenario", help="write a synthetic source/target pair")
    p.add_argument("--config", help="scenario JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--n-common", type=int)
    p.add_argument("--n-source-private", type=int)
    p.add_argument("--n-target-private", type=int)
    p.add_argument("--samples-per-class", type=int)

    for name, text in (("train-pda", "partial-set training"), ("train-openset", "open-set training")):
        p = sub.add_parser(name, help=text)
        _add_data_flags(p)
        _add_config_flags(p)
        p.add_argument("--out", required=True)

    p = sub.add_parser("tta", help="stream test-time adaptation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stream", required=True, help="dataset CSV in arrival order")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--tta-lr", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=6.0)

    p = sub.add_parser("weights-report", help="per-class mean weights of a training run")
    p.add_argument("--run", required=True, help="output directory of train-pda")
    p.add_argument("--out", required=True)

    p = sub.add_parser("loss-contours", help="power-loss grids over the simplex")
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", default="2,4,6,8")
    p.add_argument("--resolution", type=int, default=50)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--threshold", type=float, default=0.65)
    p.add_argument("--xi", type=float, default=0.5)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="run the toggle matrix")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cells", default=",".join(DEFAULT_CELLS))
    p.add_argument("--jobs", type=int, default=1)
    return parser


def load_train_config(args):
    data = {}
    if args.config:
        data = _read_json(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    for name in OVERRIDES:
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    if args.no_reweight:
        data["use_reweight"] = False
    if args.no_nrc:
        data["use_nrc"] = False
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _data_paths(args):
    if args.data:
        src, tgt = os.path.join(args.data, "source.csv"), os.path.join(args.data, "target.csv")
    else:
        src, tgt = args.source, args.target
    if not src or not tgt:
        raise UsageError("give --data DIR or both --source and --target")
    for path in (src, tgt):
        if not os.path.isfile(path):
            raise UsageError(f"dataset file not found: {path}")
    return src, tgt


def _load_pair(args):
    src_path, tgt_path = _data_paths(args)
    source = read_dataset_csv(src_path, "source")
    target = read_dataset_csv(tgt_path, "target")
    return source, target


# output bookkeeping

class Outputs:
    """Tracks files a command writes so a failure can remove them."""

    def __init__(self, out_dir):
        self.dir = out_dir
        self.created_dir = not os.path.exists(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        self.files = []

    def path(self, name):
        p = os.path.join(self.dir, name)
        self.files.append(p)
        return p

    def cleanup(self):
        if self.created_dir:
            shutil.rmtree(self.dir, ignore_errors=True)
            return
        for p in self.files:
            if os.path.isdir(p):
                shutil.rmtree(p, ignore_errors=True)
            elif os.path.exists(p):
                os.remove(p)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


# commands

def cmd_gen_scenario(args, out):
    data = _read_json(args.config) if args.config else {}
    for flag in ("seed", "n_common", "n_source_private", "n_target_private", "samples_per_class"):
        v = getattr(args, flag)
        if v is not None:
            data[flag] = v
    try:
        spec = ScenarioSpec(**data)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad scenario: {exc}") from None
    sc = generate(spec)
    write_dataset_csv(out.path("source.csv"), sc.source)
    write_dataset_csv(out.path("target.csv"), sc.target)
    with open(out.path("scenario.json"), "w") as fh:
        fh.write(spec.to_json() + "\n")
    return {"source": len(sc.source), "target": len(sc.target)}


def _save_run(out, name, config, model, log_):
    save_checkpoint(out.path("model.npz"), model, config=config.to_dict())
    log_.write_ndjson(out.path("log.ndjson"))
    _write_json(out.path("config.json"), config.to_dict())
    row = summary_row(name, config, log_)
    write_summary_csv(out.path("summary.csv"), [row])
    return row


def cmd_train(args, out, open_set=False):
    config = load_train_config(args)
    source, target = _load_pair(args)
    trainer = (OpenSetTrainer if open_set else Trainer)(config, source, target)
    model, log_ = trainer.run()
    name = "openset" if open_set else cell_name(config)
    row = _save_run(out, name, config, model, log_)
    if not open_set and config.use_reweight:
        write_weight_report(out.path("weights.csv"), source.ids, source.labels,
                            trainer.scores, trainer.weights.w)
    return row


def cmd_tta(args, out):
    if args.batch_size < 2:
        raise UsageError("--batch-size must be >= 2")
    if args.tta_lr < 0:
        raise UsageError("--tta-lr must be non-negative")
    if not os.path.isfile(args.checkpoint) or not os.path.isfile(args.stream):
        raise UsageError("checkpoint or stream file not found")
    model = load_checkpoint(args.checkpoint)["model"]
    stream = read_dataset_csv(args.stream)
    ds = stream["target"] if "target" in stream else next(iter(stream.values()))
    _, rows = stream_tpm(model, ds.features, ds.labels, args.batch_size, args.tta_lr, args.alpha)
    with open(out.path("tta.csv"), "w") as fh:
        fh.write("batch,start,size,accuracy_tpm,accuracy_noadapt\n")
        for r in rows:
            fh.write(f"{r['batch']},{r['start']},{r['size']},"
                     f"{r['accuracy_tpm']:.6f},{r['accuracy_noadapt']:.6f}\n")
    result = {"batches": len(rows)}
    if ds.labels is not None:
        result["accuracy_tpm"] = stream_accuracy(rows, "accuracy_tpm")
        result["accuracy_noadapt"] = stream_accuracy(rows, "accuracy_noadapt")
    return result


def cmd_weights_report(args, out):
    path = os.path.join(args.run, "weights.csv")
    if not os.path.isfile(path):
        raise UsageError(f"no weights.csv in {args.run} (was reweighting enabled?)")
    rep = read_weight_report(path)
    rows = class_weight_summary(rep["class_label"], rep["weight"])
    with open(out.path("class_weights.csv"), "w") as fh:
        fh.write("class_label,count,mean_weight\n")
        for c, n, w in rows:
            fh.write(f"{c},{n},{w:.6f}\n")
    return {"classes": len(rows)}


def cmd_loss_contours(args, out):
    try:
        alphas = [float(a) for a in args.alphas.split(",")]
    except ValueError:
        raise UsageError(f"--alphas must be comma-separated numbers, got {args.alphas!r}") from None
    if args.resolution < 2 or any(a <= 1 for a in alphas):
        raise UsageError("need --resolution >= 2 and every alpha > 1")
    pts = simplex_grid(args.resolution)
    for a in alphas:
        h, g = alpha_power_surface(pts, a)
        with open(out.path(f"contour_alpha{a:g}.csv"), "w") as fh:
            fh.write("p1,p2,p3,h_alpha,grad_norm\n")
            for p, hv, gv in zip(pts, h, g):
                fh.write(f"{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},{hv:.9f},{gv:.9f}\n")
    p = np.linspace(0.5, 0.99, 50)
    curves = {"entropy": two_class_gradient(p)}
    for a in alphas:
        curves[f"alpha_{a:g}"] = two_class_gradient(p, a)
    with open(out.path("two_class_gradient.csv"), "w") as fh:
        fh.write(",".join(["p"] + list(curves)) + "\n")
        for i, pv in enumerate(p):
            fh.write(",".join([f"{pv:.6f}"] + [f"{c[i]:.9f}" for c in curves.values()]) + "\n")
    return {"alphas": alphas, "grid_points": len(pts)}


def cmd_eval(args, out):
    if not 0 <= args.threshold <= 1 or args.xi < 0 or args.probes < 1:
        raise UsageError("need threshold in [0, 1], xi >= 0 and probes >= 1")
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if args.data or args.target:
        path = os.path.join(args.data, "target.csv") if args.data else args.target
    elif args.source:
        path = args.source
    else:
        raise UsageError("give --data DIR, --target or --source")
    if not os.path.isfile(path):
        raise UsageError(f"dataset file not found: {path}")
    model = load_checkpoint(args.checkpoint)["model"]
    ds = next(iter(read_dataset_csv(path).values()))
    result = {"n": len(ds), "margin": empirical_margin(model, ds),
              "robustness": empirical_robustness(model, ds, args.xi, args.probes,
                                                 np.random.default_rng(args.seed))}
    if ds.labels is not None:
        private = ds.roles == "target_private"
        if private.any() and (~private).any():
            h, a, r = open_set_scores(model, ds, args.threshold)
            result.update(h_score=h, known_accuracy=a, unknown_recall=r)
        else:
            result["accuracy"] = accuracy(model, ds)
    if out is not None:
        _write_json(out.path("eval.json"), result)
    return result


def _run_cell(job):
    cell, config, src_path, tgt_path = job
    source = read_dataset_csv(src_path, "source")
    target = read_dataset_csv(tgt_path, "target")
    _, log_ = train(config, source, target)
    return summary_row(cell, config, log_), log_


def cmd_ablate(args, out):
    base = load_train_config(args)
    cells = [c.strip() for c in args.cells.split(",") if c.strip()]
    configs = [ablation_config(base, c) for c in cells]
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    src_path, tgt_path = _data_paths(args)
    jobs = [(c, cfg, src_path, tgt_path) for c, cfg in zip(cells, configs)]
    if args.jobs == 1:
        results = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    rows = [r for r, _ in results]
    for (cell, _, _, _), (_, log_) in zip(jobs, results):
        log_.write_ndjson(out.path(f"log_{cell.replace('+', '_')}.ndjson"))
    write_summary_csv(out.path("ablation.csv"), rows)
    return {r["run"]: r["final_accuracy"] for r in rows}


COMMANDS = {
    "gen-scenario": cmd_gen_scenario,
    "train-pda": lambda a, o: cmd_train(a, o, open_set=False),
    "train-openset": lambda a, o: cmd_train(a, o, open_set=True),
    "tta": cmd_tta,
    "weights-report": cmd_weights_report,
    "loss-contours": cmd_loss_contours,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", exc)
    out_dir = getattr(args, "out", None)
    out = None
    try:
        out = Outputs(out_dir) if out_dir else None
        result = COMMANDS[args.command](args, out)
    except UsageError as exc:
        if out is not None:
            out.cleanup()
        return _fail(1, "usage", exc)
    except Exception as exc:  # any failure while running: report and clean up
        if out is not None:
            out.cleanup()
        return _fail(2, type(exc).__name__, exc)
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
