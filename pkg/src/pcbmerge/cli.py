"""Command-line entry point: ``pcbmerge {merge,search,bench,inspect}``.

JSON summaries go to stdout, diagnostics to stderr. Exit codes: 0 success,
2 invalid input or configuration, 3 I/O or file-format failure, 4 fitness
evaluation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint_io import load_checkpoint, save_checkpoint, validate_compatibility
from .errors import ConfigError, IoFailure, MergeError
from .evaluation import (
    ExternalEvaluator,
    external_fitness,
    gen_synthetic_suite,
    score_synthetic,
    synthetic_fitness,
)
from .pcb import jsonl_dump
from .recipe import METHODS, PER_TASK_METHODS, MergeRecipe, prepare, run_prepared
from .search import SearchSpace, grid_candidates, grid_search, search
from .task_vector import compute_task_vector, cosine_similarity, vector_stats

logger = logging.getLogger("pcbmerge")

RECIPE_FIELDS = {f.name for f in fields(MergeRecipe)}

BENCH_VARIANTS = {
    "average": ("average", {}),
    "task-arithmetic": ("task-arithmetic", {}),
    "ties": ("ties", {}),
    "pcb": ("pcb", {}),
    "pcb-no-drop": ("pcb", {"enable_drop": False}),
    "pcb-no-rescale": ("pcb", {"enable_rescale": False}),
    "pcb-no-intra": ("pcb", {"enable_intra": False}),
    "pcb-no-inter": ("pcb", {"enable_inter": False}),
}

CSV_COLUMNS = ["method", "seed", "n", "D", "s", "overlap", "mean_loss", "per_task_losses", "wall_ms"]


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of numbers, got {text!r}") from None


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of integers, got {text!r}") from None


def _range(text: str) -> tuple:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    return lo, hi


def parse_synthetic(text: str) -> dict:
    """``n=2,D=64,s=0.1[,overlap=0.5][,seed=3]`` -> suite arguments."""
    params = {"n": 2, "D": 64, "s": 0.1, "overlap": 0.0, "seed": 0}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in params:
            raise ConfigError(f"unknown synthetic suite key {key!r} (use n, D, s, overlap, seed)")
        try:
            params[key] = type(params[key])(value) if key not in ("s", "overlap") else float(value)
        except ValueError:
            raise ConfigError(f"bad value for synthetic suite key {key!r}: {value!r}") from None
    return params


def _add_recipe_args(p: argparse.ArgumentParser, need_models: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file with recipe defaults (flags win)")
    p.add_argument("--method", choices=METHODS, default=S)
    if need_models:
        p.add_argument("--pretrained", default=S)
        p.add_argument("--models", nargs="+", default=S)
    p.add_argument("--lambda", dest="lam", type=float, default=S, help="global scale (default 1.0)")
    p.add_argument("--lambdas", type=_float_list, default=S, help="per-task scales, comma separated")
    p.add_argument("--ratio", type=float, default=S, help="mask ratio r / TIES keep fraction (default 0.2)")
    p.add_argument("--trim-k", dest="trim_k", type=float, default=S, help="TIES keep fraction (default: --ratio)")
    p.add_argument("--granularity", choices=["per_tensor", "global"], default=S)
    p.add_argument("--no-intra", dest="enable_intra", action="store_false", default=S)
    p.add_argument("--no-inter", dest="enable_inter", action="store_false", default=S)
    p.add_argument("--no-drop", dest="enable_drop", action="store_false", default=S)
    p.add_argument("--no-rescale", dest="enable_rescale", action="store_false", default=S)
    p.add_argument("--no-inter-norm", dest="inter_norm", action="store_false", default=S,
                   help="omit norm() inside inter-balancing")
    p.add_argument("--regulator-n", dest="regulator_n", type=int, default=S)
    p.add_argument("--dare", type=float, default=S, help="DARE drop rate applied to task vectors first")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--dump-scores", dest="dump_scores", default=S, help="write PCB score statistics as JSON lines")
    p.add_argument("--skip-missing", dest="skip_missing", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcbmerge", description="Training-free model merging.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    merge = sub.add_parser("merge", help="merge checkpoints into one")
    _add_recipe_args(merge)

    srch = sub.add_parser("search", help="search merging coefficients")
    _add_recipe_args(srch)
    srch.add_argument("--eval-cmd", dest="eval_cmd", help="scoring command containing {checkpoint}")
    srch.add_argument("--synthetic", help="synthetic suite, e.g. n=2,D=64,s=0.1,overlap=0.5")
    srch.add_argument("--budget", type=int, default=500)
    srch.add_argument("--range", dest="search_range", type=_range, default=(0.8, 2.5))
    srch.add_argument("--grid", type=float, help="grid step for a uniform-lambda search")
    srch.add_argument("--population", type=int)
    srch.add_argument("--report", default="search_report.json")
    srch.add_argument("--timeout", type=float, default=3600)
    srch.add_argument("--scratch", help="directory for temporary checkpoints (env PCBMERGE_SCRATCH)")
    srch.add_argument("--keep", action="store_true", help="keep temporary checkpoints")
    srch.add_argument("--jobs", type=int, default=1, help="concurrent fitness evaluations")

    bench = sub.add_parser("bench", help="compare methods on synthetic suites")
    bench.add_argument("--n", type=_int_list, default=[4], help="task counts, comma separated")
    bench.add_argument("--D", dest="dim", type=int, default=512)
    bench.add_argument("--sparsity", type=float, default=0.1)
    bench.add_argument("--overlap", type=float, default=0.0)
    bench.add_argument("--seeds", type=int, default=5, help="run seeds 0..N-1")
    bench.add_argument("--methods", default="average,task-arithmetic,ties,pcb",
                       help=f"comma separated subset of {', '.join(BENCH_VARIANTS)}")
    bench.add_argument("--lambda", dest="lam", type=float, default=1.0)
    bench.add_argument("--ratio", type=float, help="mask ratio / keep fraction (default: --sparsity)")
    bench.add_argument("--csv", default="bench.csv")
    bench.add_argument("--jobs", type=int, default=1)

    insp = sub.add_parser("inspect", help="describe checkpoints and task vectors")
    insp.add_argument("paths", nargs="+")
    insp.add_argument("--pretrained")
    return parser


def resolve_recipe(args: argparse.Namespace) -> tuple:
    """Flags > JSON config file > defaults. Returns (recipe, effective config dict)."""
    values = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            loaded = json.loads(Path(cfg_path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read config {cfg_path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {cfg_path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - RECIPE_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in vars(args).items() if k in RECIPE_FIELDS})
    recipe = MergeRecipe(**values)
    return recipe, recipe.hyperparameters()


def _load(path):
    return load_checkpoint(path)


def _load_inputs(recipe: MergeRecipe):
    pre = _load(recipe.pretrained) if recipe.pretrained else None
    fts = [_load(p) for p in recipe.models]
    return pre, fts


def cmd_merge(args) -> int:
    recipe, effective = resolve_recipe(args)
    if not recipe.out:
        raise ConfigError("--out is required")
    recipe.validate()
    t0 = time.perf_counter()
    pre, fts = _load_inputs(recipe)
    prep = prepare(recipe, pre, fts)
    dump_fh = open(recipe.dump_scores, "w") if recipe.dump_scores else None
    try:
        outcome = run_prepared(recipe, prep, dump=jsonl_dump(dump_fh) if dump_fh else None)
    finally:
        if dump_fh:
            dump_fh.close()
    save_checkpoint(outcome.checkpoint, recipe.out)
    summary = {
        "command": "merge",
        "method": recipe.method,
        "config": effective,
        "inputs": {"pretrained": recipe.pretrained, "models": recipe.models},
        "output": recipe.out,
        "kept_fraction": outcome.kept_fraction,
        "schema_warnings": prep.schema.warnings,
        "wall_time_s": round(time.perf_counter() - t0, 6),
    }
    _emit(summary)
    return 0


def cmd_search(args) -> int:
    recipe, effective = resolve_recipe(args)
    if bool(args.eval_cmd) == bool(args.synthetic):
        raise ConfigError("give exactly one fitness source: --eval-cmd or --synthetic")
    lo, hi = args.search_range
    grid = None
    if args.grid is not None:
        grid = grid_candidates(lo, hi, args.grid)
    elif recipe.method not in PER_TASK_METHODS:
        raise ConfigError(f"per-task search supports {', '.join(PER_TASK_METHODS)}; use --grid for {recipe.method}")
    if recipe.method == "average":
        raise ConfigError("weight averaging has no coefficient to search")
    if args.budget < 1:
        raise ConfigError("--budget must be positive")
    if args.jobs < 1:
        raise ConfigError("--jobs must be positive")

    t0 = time.perf_counter()
    suite = None
    if args.synthetic:
        params = parse_synthetic(args.synthetic)
        recipe.validate(need_files=False)
        suite = gen_synthetic_suite(params["n"], params["D"], params["s"], params["overlap"], params["seed"])
        pre, fts = suite.pretrained, suite.task_checkpoints
    else:
        evaluator = ExternalEvaluator(args.eval_cmd, args.timeout)
        recipe.validate()
        pre, fts = _load_inputs(recipe)
    prep = prepare(recipe, pre, fts)
    n_tasks = len(fts)

    if grid is not None:
        def build(params):
            return run_prepared(recipe, prep, lam=float(params[0])).checkpoint
    else:
        def build(params):
            return run_prepared(recipe, prep, lambdas=[float(x) for x in params]).checkpoint

    if suite is not None:
        fitness = synthetic_fitness(suite, build)
    else:
        fitness = external_fitness(evaluator, build, scratch=args.scratch, keep=args.keep)

    evaluate = None
    if args.jobs > 1:
        pool = ThreadPoolExecutor(args.jobs)

        def evaluate(fn, points):
            return list(pool.map(fn, points))

    if grid is not None:
        report = grid_search(grid, fitness)
        best = {"lam": report.best_params[0]}
        mode = "grid"
    else:
        space = SearchSpace(n_tasks, lo, hi)
        report = search(space, fitness, args.budget, seed=recipe.seed,
                        population_size=args.population, evaluate=evaluate)
        best = {"lambdas": report.best_params}
        mode = "cma-es"

    best_recipe = dict(effective, **best)
    out_info = None
    if recipe.out:
        save_checkpoint(build(report.best_params), recipe.out)
        out_info = recipe.out
    doc = {
        "command": "search",
        "mode": mode,
        "method": recipe.method,
        "config": effective,
        "fitness_source": "synthetic" if suite is not None else "external",
        "synthetic": parse_synthetic(args.synthetic) if suite is not None else None,
        "range": [lo, hi],
        "budget": args.budget if grid is None else len(grid),
        "best_recipe": best_recipe,
        "output": out_info,
        **report.to_dict(),
        "wall_time_s": round(time.perf_counter() - t0, 6),
    }
    try:
        Path(args.report).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write report {args.report}: {exc}") from None
    summary = {k: doc[k] for k in ("command", "mode", "method", "best_recipe", "best_fitness",
                                   "evaluations_used", "output", "wall_time_s")}
    summary["report"] = args.report
    _emit(summary)
    return 0


def run_bench_cell(method: str, seed: int, n: int, dim: int, sparsity: float, overlap: float,
                   lam: float, ratio: float) -> dict:
    base, toggles = BENCH_VARIANTS[method]
    suite = gen_synthetic_suite(n, dim, sparsity, overlap, seed)
    recipe = MergeRecipe(method=base, lam=lam, ratio=ratio, seed=seed, **toggles)
    t0 = time.perf_counter()
    prep = prepare(recipe, suite.pretrained, suite.task_checkpoints)
    merged = run_prepared(recipe, prep).checkpoint
    wall_ms = (time.perf_counter() - t0) * 1000
    losses, mean = score_synthetic(suite, merged)
    return {
        "method": method, "seed": seed, "n": n, "D": dim, "s": sparsity, "overlap": overlap,
        "mean_loss": mean, "per_task_losses": losses, "wall_ms": wall_ms,
    }


def format_table(rows: list) -> str:
    header = ["method", "seed", "n", "D", "s", "overlap", "mean_loss", "wall_ms"]
    body = [
        [r["method"], str(r["seed"]), str(r["n"]), str(r["D"]), f"{r['s']:g}", f"{r['overlap']:g}",
         f"{r['mean_loss']:.6g}", f"{r['wall_ms']:.1f}"]
        for r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.rjust(w) if i > 0 else c.ljust(w) for i, (c, w) in enumerate(zip(b, widths))))
    return "\n".join(lines)


def write_csv(rows: list, path) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "per_task_losses": ";".join(repr(float(x)) for x in r["per_task_losses"]),
                         "mean_loss": repr(float(r["mean_loss"])), "wall_ms": f"{r['wall_ms']:.3f}"})
    try:
        Path(path).write_text(buf.getvalue())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in BENCH_VARIANTS]
    if unknown or not methods:
        raise ConfigError(f"unknown bench methods {unknown}; choose from {', '.join(BENCH_VARIANTS)}")
    if args.seeds < 1 or args.jobs < 1:
        raise ConfigError("--seeds and --jobs must be positive")
    ratio = args.ratio if args.ratio is not None else args.sparsity
    if not 0 < ratio <= 1:
        raise ConfigError(f"ratio must be in (0, 1], got {ratio}")
    cells = [(m, seed, n) for n in args.n for m in methods for seed in range(args.seeds)]
    for n in args.n:
        # fail fast on infeasible suites before launching work
        gen_synthetic_suite(n, args.dim, args.sparsity, args.overlap, 0)

    def run(cell):
        m, seed, n = cell
        return run_bench_cell(m, seed, n, args.dim, args.sparsity, args.overlap, args.lam, ratio)

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(run, cells))
    else:
        rows = [run(c) for c in cells]
    write_csv(rows, args.csv)
    print(format_table(rows))
    return 0


def cmd_inspect(args) -> int:
    ckpts = [_load(p) for p in args.paths]
    report = {"command": "inspect", "checkpoints": []}
    for path, ck in zip(args.paths, ckpts):
        tensors = {}
        for name, t in ck.tensors.items():
            entry = {"dtype": t.dtype, "shape": list(t.shape), "mergeable": t.is_float}
            if t.is_float and t.numel:
                x = np.asarray(t.to_numpy(), dtype=np.float64)
                entry.update(l2_norm=float(np.sqrt(np.dot(x.ravel(), x.ravel()))),
                             max_abs=float(np.abs(x).max()), mean=float(x.mean()))
            tensors[name] = entry
        report["checkpoints"].append({"path": path, "metadata": ck.metadata, "tensors": tensors})
    if args.pretrained:
        pre = _load(args.pretrained)
        schema = validate_compatibility([pre, *ckpts])
        tvs = [compute_task_vector(ck, pre, label=p, schema=schema) for p, ck in zip(args.paths, ckpts)]
        report["task_vectors"] = [
            {"path": tv.label, **vector_stats(tv).to_dict()} for tv in tvs
        ]
        matrix = []
        for a in tvs:
            row = []
            for b in tvs:
                try:
                    row.append(cosine_similarity(a, b))
                except MergeError:
                    row.append(None)
            matrix.append(row)
        report["cosine_similarity"] = matrix
    _emit(report)
    return 0


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, default=str) + "\n")


COMMANDS = {"merge": cmd_merge, "search": cmd_search, "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except MergeError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "IoFailure", "message": str(exc)}) + "\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
