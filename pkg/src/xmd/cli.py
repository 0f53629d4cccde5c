"""Command-line entry point: ``xmd {gradcheck,synth,train,compare,sweep,probe}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import matcore
from .config import RunConfig, load_config
from .evaluate import linear_probe, minority_majority_split, within_cross_alpha
from .experiments import compare_jobs, eval_batch, format_csv, run_jobs, sweep_jobs
from .losses import (
    LossConfig,
    finite_difference_check,
    loss_alpha,
    loss_knn,
    loss_slidr,
    loss_st,
)
from .similarity import balance_weights, knn_mask, rescale_unit_interval, superpixel_similarity
from .synth import Scenario, class_counts, false_negative_rate, generate_batch, to_point_granularity
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    embed,
    init_model,
    load_checkpoint,
    parameter_gradient_check,
    save_checkpoint,
    train,
    write_history,
)

logger = logging.getLogger("xmd")

VARIANTS = ("slidr", "alpha", "knn", "st")
GRADCHECK_SIZES = (4, 8, 16)
GRADCHECK_TOL = 1e-6
PAPER_ALPHA_GRID = (0.0, 0.2, 0.5, 0.8)
PAPER_K_GRID = (1.0, 5.0, 10.0)


@dataclass
class GradInstance:
    variant: str
    seed: int
    m: int
    loss_error: float
    param_error: float

    @property
    def error(self) -> float:
        return max(self.loss_error, self.param_error)


def _gradcheck_loss(variant: str, m: int, seed: int, perturb: float):
    rng = np.random.default_rng([seed, m])
    q = rng.standard_normal((m, 3))
    k = rng.standard_normal((m, 3))
    alpha = rescale_unit_interval(superpixel_similarity(rng.standard_normal((m, 4))))
    mask = knn_mask(alpha, 1)
    _, w, wsum = balance_weights(alpha, "conventional")
    cfg = LossConfig(temperature=0.5)
    fn = {
        "slidr": lambda a, b: loss_slidr(a, b, cfg),
        "alpha": lambda a, b: loss_alpha(a, b, alpha, cfg),
        "knn": lambda a, b: loss_knn(a, b, mask, cfg),
        "st": lambda a, b: loss_st(a, b, mask, w, wsum, cfg),
    }[variant]
    if perturb:
        def broken(a, b, fn=fn):
            res = fn(a, b)
            return replace(res, grad_q=res.grad_q + perturb)
        return finite_difference_check(broken, q, k)
    return finite_difference_check(fn, q, k)


def _gradcheck_params(variant: str, m: int, seed: int, perturb: float) -> float:
    sc = Scenario(num_classes=4, class_proportions=(0.25,) * 4, feature_dim=5, point_dim=6,
                  superpixels_per_batch=m, points_per_superpixel=(1, 3), seed=seed)
    cfg = TrainConfig(variant=variant, hidden_dim=3, embed_dim=3, activation="tanh",
                      k_percent=25.0, balance="conventional", alpha_min=0.2,
                      temperature=0.5, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        batch = generate_batch(sc)
    return parameter_gradient_check(batch, init_model(sc, cfg), cfg, perturb=perturb)


def gradcheck_instances(variants=VARIANTS, seeds: int = 10, perturb: float = 0.0) -> list[GradInstance]:
    """Finite-difference checks of the losses and of the full trainer backward pass."""
    out = []
    for variant in variants:
        for seed in range(seeds):
            for m in GRADCHECK_SIZES:
                out.append(GradInstance(
                    variant, seed, m,
                    _gradcheck_loss(variant, m, seed, perturb),
                    _gradcheck_params(variant, m, seed, perturb),
                ))
    return out


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _overrides(args) -> dict:
    train = {}
    if getattr(args, "variant", None):
        train["variant"] = args.variant
    for key in ("k_percent", "alpha_min"):
        value = getattr(args, key, None)
        if isinstance(value, float):
            train[key] = value
    if getattr(args, "balance", None):
        train["balance"] = "paper" if args.balance == "on" else args.balance
    if getattr(args, "granularity", None):
        train["granularity"] = args.granularity
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out is not None:
        run["output_dir"] = args.out
    return {"train": train, "run": run}


def _load(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _out_dir(run: RunConfig) -> Path:
    path = Path(run.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gradcheck(args) -> int:
    variants = (args.variant,) if args.variant else VARIANTS
    perturb = 1e-3 if args.inject_grad_error else 0.0
    results = gradcheck_instances(variants, args.seeds, perturb)
    print(f"checked {len(results)} instances")
    failed = [r for r in results if not r.error < GRADCHECK_TOL]
    for variant in variants:
        errs = [r.error for r in results if r.variant == variant]
        print(f"{variant:6s} max relative error {max(errs):.3e}")
    for r in failed:
        print(f"FAIL variant={r.variant} seed={r.seed} M={r.m} "
              f"loss_err={r.loss_error:.3e} param_err={r.param_error:.3e}")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    run = _load(args)
    out = _out_dir(run)
    batch = generate_batch(run.scenario, index=args.index)
    if run.train.granularity == "point":
        batch = to_point_granularity(batch, run.train.max_pairs, run.seed, args.index)
    matcore.write_binary(out / "superpixel_features.xmd", batch.superpixel_features)
    matcore.write_binary(out / "point_features.xmd", batch.point_features)
    (out / "labels.txt").write_text("".join(f"{int(c)}\n" for c in batch.class_labels))
    _, owner = batch.pair_set.point_labels()
    (out / "point_groups.txt").write_text("".join(f"{int(g)}\n" for g in owner))
    alpha = superpixel_similarity(batch.superpixel_features)
    within, cross = within_cross_alpha(alpha, batch.class_labels)
    diag = {
        "superpixels": int(batch.superpixel_features.shape[0]),
        "points": int(batch.point_features.shape[0]),
        "false_negative_rate": false_negative_rate(batch),
        "class_counts": class_counts(batch, run.scenario.num_classes).tolist(),
        "within_class_alpha": within,
        "cross_class_alpha": cross,
    }
    text = json.dumps(diag, indent=2) + "\n"
    (out / "diagnostics.json").write_text(text)
    print(text, end="")
    return 0


def cmd_train(args) -> int:
    run = _load(args)
    out = _out_dir(run)
    try:
        result = train(run.scenario, run.train)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_history(out / "history.csv", result.history)
    save_checkpoint(out / "checkpoint", result.model)
    losses = result.losses
    print(f"steps={len(losses)} initial_loss={losses[0]:.6f} final_loss={losses[-1]:.6f}")
    return 0


def _emit_rows(run: RunConfig, rows: list[dict], name: str) -> int:
    text = format_csv(rows, run.digest())
    (_out_dir(run) / name).write_text(text)
    print(text, end="")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_compare(args) -> int:
    run = _load(args)
    seeds = range(run.seed, run.seed + args.seeds)
    return _emit_rows(run, run_jobs(compare_jobs(run, seeds)), "compare.csv")


def cmd_sweep(args) -> int:
    run = _load(args)
    alpha_grid, k_grid = args.alpha_min, args.k_percent
    if alpha_grid is None and k_grid is None:
        alpha_grid, k_grid = PAPER_ALPHA_GRID, PAPER_K_GRID
    seeds = range(run.seed, run.seed + args.seeds)
    try:
        jobs = sweep_jobs(run, seeds, alpha_grid or (), k_grid or ())
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return _emit_rows(run, run_jobs(jobs), "sweep.csv")


def cmd_probe(args) -> int:
    run = _load(args)
    model = load_checkpoint(args.checkpoint)
    ev = eval_batch(run)
    q = embed(model, ev)
    minority, majority = minority_majority_split(run.scenario.proportions, run.evaluation.minority_threshold)
    report = linear_probe(q, ev.class_labels, run.evaluation.ridge_lambda, split_seed=run.seed)
    text = report.with_groups(minority, majority).to_json()
    (_out_dir(run) / "probe.json").write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat 'section.key = value' config file")
        p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        p.add_argument("--out", help="output directory (overrides run.output_dir)")

    def train_flags(p, lists=False):
        p.add_argument("--variant", choices=VARIANTS)
        number = _float_list if lists else float
        p.add_argument("--k-percent", type=number, dest="k_percent")
        p.add_argument("--alpha-min", type=number, dest="alpha_min")
        p.add_argument("--balance", choices=("on", "off", "paper", "conventional"))
        p.add_argument("--granularity", choices=("superpixel", "point"))

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss variant")
    common(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--inject-grad-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write one synthetic batch and its diagnostics")
    common(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--granularity", choices=("superpixel", "point"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model, write history and checkpoint")
    common(p)
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="masking x balancing grid")
    common(p)
    train_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="alpha_min and/or K-percent sweeps")
    common(p)
    p.add_argument("--alpha-min", type=_float_list, dest="alpha_min", help="e.g. 0,0.2,0.5,0.8")
    p.add_argument("--k-percent", type=_float_list, dest="k_percent", help="e.g. 1,5,10")
    p.add_argument("--balance", choices=("on", "off", "paper", "conventional"))
    p.add_argument("--granularity", choices=("superpixel", "point"))
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="linear probe of a saved checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
