"""Command-line entry point: ``safemerge <command> [flags]``.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 optimizer warning threshold
exceeded (outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import criterion
from .data import ModArithSpec, QADataset
from .merge import METHODS, MergeRecipe, checkpoint_digest, merge
from .optimize import (
    EVOMM_METHODS,
    build_space,
    evomm_optimize,
    grid_search,
    lm_cocktail_weights,
    recipe_from_grid,
    recipe_from_point,
)
from .pipeline import (
    ToyData,
    ToyTrainConfig,
    eval_sets,
    make_toy_data,
    substream,
    train_base,
    train_expert,
)
from .tensor_store import Checkpoint, load_checkpoint, save_checkpoint
from .toy_lm import ToyLMConfig, param_shapes

logger = logging.getLogger("safemerge")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_OPTIMIZER = 0, 2, 3, 4
SELECT_TOP = 10


class OptimizerWarning(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(path: str) -> tuple[Checkpoint, ToyLMConfig]:
    ckpt = load_checkpoint(path)
    return ckpt, ToyLMConfig.from_metadata(dict(ckpt.metadata))


def _spec_of(data: ToyData) -> ModArithSpec:
    return ModArithSpec.from_domain(data.expert[0].domain)


def _objective_sets(data: ToyData, mode: str) -> tuple[QADataset | None, QADataset]:
    """Training splits for the merge objective; ``expert`` drops the safety term."""
    return (None if mode == "expert" else data.train_aligned), data.train_expert


def cmd_gen_data(args) -> int:
    spec = ModArithSpec(modulus=args.modulus)
    data = make_toy_data(args.seed, args.k, spec, args.holdout)
    data.write(args.out_dir)
    logger.info("wrote %d expert, %d safety and %d held-out pairs to %s",
                len(data.expert), len(data.aligned), len(data.heldout), args.out_dir)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = ToyLMConfig()
    data = ToyData.read(args.data_dir or args.out_dir, cfg.vocab_size)
    tc = ToyTrainConfig(
        base_steps=args.base_steps,
        expert_steps=args.expert_steps,
        lr=args.lr,
        expert_lr=args.expert_lr,
        misaligned_share=args.misaligned_share,
    )
    base = train_base(data, cfg, tc, args.seed, _spec_of(data))
    expert = train_expert(base, data, cfg, tc, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint(base.tensors, {**cfg.to_metadata(), "role": "base"}), out / "base.safetensors")
    save_checkpoint(Checkpoint(expert.tensors, {**cfg.to_metadata(), "role": "expert"}), out / "expert.safetensors")
    return EXIT_OK


def cmd_merge(args) -> int:
    recipe = MergeRecipe.load(args.recipe)
    base, _ = _load_model(args.base)
    experts = [load_checkpoint(p) for p in args.experts]
    merged = merge(base, experts, recipe)
    out = Path(args.out) if args.out else Path(args.out_dir) / "merged.safetensors"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, out)
    print(f"method={recipe.method} models={len(experts) + 1} params={merged.num_params} "
          f"lambdas={recipe.lambdas} hyper={recipe.hyper} sha256={checkpoint_digest(merged)}")
    return EXIT_OK


def _report(ckpt, cfg, data, alpha, seed) -> dict:
    prompts, items = eval_sets(data, seed, _spec_of(data))
    return criterion.eval_report(ckpt, cfg, prompts, items, data.train_aligned, data.train_expert, alpha)


def _write_history(path: Path, history: Sequence[dict]) -> None:
    fields = ["generation", "best_f", "mean_f", "sigma", "nonfinite"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in fields})


def _write_table(path: Path, table: Sequence[dict]) -> None:
    if not table:
        return
    fields = list(table[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(table)


def _reselect(args, base, experts, cfg, data, space_rows, to_recipe):
    """Re-rank the best ``SELECT_TOP`` rows by accuracy or alignment (ties keep table order)."""
    best = None
    for row in space_rows[:SELECT_TOP]:
        recipe = to_recipe(row)
        merged = merge(base, experts, recipe)
        rep = _report(merged, cfg, data, args.alpha, args.seed)
        if best is None or rep[args.select_by] > best[2][args.select_by]:
            best = (recipe, merged, rep)
    return best


def cmd_optimize(args) -> int:
    torch.manual_seed(substream(args.seed, "torch"))
    base, cfg = _load_model(args.base)
    experts = [load_checkpoint(p) for p in args.experts]
    data = ToyData.read(args.data_dir or args.out_dir, cfg.vocab_size)
    d_safety, d_expert = _objective_sets(data, args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    warn = None

    if args.strategy == "evomm":
        if args.method not in EVOMM_METHODS:
            raise ValueError(f"--strategy evomm supports {EVOMM_METHODS}")
        res = evomm_optimize(base, experts, args.method, d_safety, d_expert, args.alpha,
                             args.steps, args.seed, cfg, sigma0=args.sigma0, batch=args.batch)
        recipe, merged, history, table = res.recipe, res.merged, res.history, res.table
        _write_history(out / "history.csv", history)
        evals = max(res.cma.evaluations, 1)
        if res.cma.nonfinite / evals > args.nonfinite_threshold:
            warn = f"{res.cma.nonfinite}/{evals} objective values were non-finite"
        names = [k for k in table[0] if k not in ("l_merge", "l_safety", "l_expert")] if table else []

        space = build_space(args.method, len(experts))

        def to_recipe(row):
            return recipe_from_point(args.method, space, [row[n] for n in names], args.seed)

    elif args.strategy == "grid":
        evaluator = criterion.MergeLossEvaluator(cfg, d_safety, d_expert, args.alpha)
        res = grid_search(base, experts, args.method, lambda r, m: evaluator(m).l_merge, seed=args.seed)
        recipe, merged = res.recipe, res.merged
        table = sorted(res.table, key=lambda row: row["value"])

        def to_recipe(row):
            point = {k: v for k, v in row.items() if k != "value"}
            return recipe_from_grid(args.method, point, len(experts), args.seed)

    else:  # lm-cocktail: softmax weights over every model in the pool
        pool = [base, *experts]
        ds = d_expert if d_safety is None else d_safety + d_expert
        lambdas = lm_cocktail_weights(pool, cfg, ds)
        recipe = MergeRecipe("linear-soup", lambdas, {}, args.seed)
        merged = merge(base, experts, recipe)
        table = [{"model": i, "lambda": lam} for i, lam in enumerate(lambdas)]
        to_recipe = None

    if args.select_by != "l_merge" and to_recipe is not None:
        recipe, merged, _ = _reselect(args, base, experts, cfg, data, table, to_recipe)

    recipe.save(out / "recipe.json")
    save_checkpoint(merged, out / "merged.safetensors")
    _write_table(out / "results.csv", table)
    report = _report(merged, cfg, data, args.alpha, args.seed)
    report.update({"strategy": args.strategy, "method": recipe.method, "data": args.data})
    _write_json(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    if warn:
        raise OptimizerWarning(warn)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, cfg = _load_model(args.model)
    data = ToyData.read(args.data_dir or args.out_dir, cfg.vocab_size)
    report = _report(ckpt, cfg, data, args.alpha, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.model)
    for name in ckpt.names():
        print(f"{name}\t{list(ckpt[name].shape)}")
    print(f"# tensors={len(ckpt)} params={ckpt.num_params}")
    for k, v in sorted(ckpt.metadata.items()):
        print(f"# {k}={v}")
    try:
        cfg = ToyLMConfig.from_metadata(dict(ckpt.metadata))
        ok = {n: tuple(ckpt[n].shape) for n in ckpt.names()} == dict(param_shapes(cfg))
        print(f"# toy-lm schema {'ok' if ok else 'MISMATCH'}")
    except ValueError:
        pass
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--data-dir", default=None, help="dataset directory (defaults to --out-dir)")
    common.add_argument("--alpha", type=float, default=criterion.DEFAULT_ALPHA)
    common.add_argument("--k", type=int, default=1000)
    common.add_argument("--steps", type=int, default=100)
    common.add_argument("--threads", type=int, default=None, help="cap torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safemerge", description="Safety-aware model merging toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write toy JSONL datasets")
    g.add_argument("--modulus", type=int, default=11)
    g.add_argument("--holdout", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_data)

    defaults = ToyTrainConfig()
    t = sub.add_parser("train-toy", parents=[common], help="train the aligned base and misaligned expert")
    t.add_argument("--base-steps", type=int, default=defaults.base_steps)
    t.add_argument("--expert-steps", type=int, default=defaults.expert_steps)
    t.add_argument("--lr", type=float, default=defaults.lr)
    t.add_argument("--expert-lr", type=float, default=defaults.expert_lr)
    t.add_argument("--misaligned-share", type=float, default=defaults.misaligned_share)
    t.set_defaults(func=cmd_train_toy)

    m = sub.add_parser("merge", parents=[common], help="apply a recipe")
    m.add_argument("--recipe", required=True)
    m.add_argument("--base", required=True)
    m.add_argument("--experts", nargs="+", required=True)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_merge)

    o = sub.add_parser("optimize", parents=[common], help="search task weights")
    o.add_argument("--base", required=True)
    o.add_argument("--experts", nargs="+", required=True)
    o.add_argument("--strategy", choices=("grid", "evomm", "lm-cocktail"), default="evomm")
    o.add_argument("--method", choices=METHODS, default="ties")
    o.add_argument("--data", choices=("expert", "expert+safety"), default="expert+safety")
    o.add_argument("--select-by", choices=("l_merge", "accuracy", "alignment"), default="l_merge")
    o.add_argument("--batch", type=int, default=None, help="evaluate the objective on a seeded subsample")
    o.add_argument("--sigma0", type=float, default=0.3)
    o.add_argument("--nonfinite-threshold", type=float, default=0.25,
                   help="exit 4 when a larger share of objective values is non-finite")
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("eval", parents=[common], help="alignment/accuracy report for one model")
    e.add_argument("--model", required=True)
    e.add_argument("--report", default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", parents=[common], help="print a checkpoint's schema")
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except OptimizerWarning as exc:
        logger.warning("optimizer: %s", exc)
        return EXIT_OPTIMIZER
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
