import argparse
import itertools
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

from datagen import gen_clustered_points, gen_graph, write_edges, write_points
from forelem.config import ClusterGenConfig, GraphGenConfig, RunConfig
from forelem.errors import ForelemError, UnknownVariant
from forelem.executor import RunStatus
from forelem.variants import all_variants
from runner import CSV_COLUMNS, RUNNERS
from utils import resolve_seed, set_random_seeds

warnings.filterwarnings("ignore")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 2
EXIT_NO_TERMINATION = 3
EXIT_USAGE = 4

# axis the --sizes grid varies for each app
SIZE_FIELD = {"kmeans": "n", "pagerank": "scale", "matmul": "size", "sort": "size"}


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def add_run_arguments(parser: argparse.ArgumentParser, grid: bool = False):
    parser.add_argument("--app", choices=sorted(RUNNERS), required=True)
    if grid:
        parser.add_argument("--variants", nargs="+", default=[None])
        parser.add_argument("--workers", type=int, nargs="+", default=[1])
        parser.add_argument("--partitions", type=int, nargs="+", default=[1])
        parser.add_argument("--sizes", type=int, nargs="+", default=None)
        parser.add_argument("--dims", type=int, nargs="+", default=None)
        parser.add_argument("--ks", type=int, nargs="+", default=None)
    else:
        parser.add_argument("--variant", type=str, default=None)
        parser.add_argument("--workers", type=int, default=1)
        parser.add_argument("--partitions", type=int, default=1)
        parser.add_argument("--print-program", action="store_true")
    parser.add_argument("--input", type=Path, default=None)
    parser.add_argument("--variants-file", type=Path, default=None)
    parser.add_argument("--sweeps-per-exchange", type=int, default=1)
    parser.add_argument("--max-sweeps", type=int, default=10_000)
    parser.add_argument("--scheduler", choices=["in_order", "shuffled", "random"], default="in_order")
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--layout", choices=["aos", "soa", "jagged"], default=None)
    parser.add_argument("--exchange", choices=["buffered", "master", "indirect"], default=None)
    parser.add_argument("--epsilon", type=float, default=None)
    parser.add_argument("--damping", type=float, default=0.85)
    parser.add_argument("--delta", dest="convergence_delta", type=float, default=0.0)
    parser.add_argument("--threshold", type=float, default=None)
    parser.add_argument("--k", type=int, default=4)
    parser.add_argument("--n", type=int, default=4096)
    parser.add_argument("--dim", type=int, default=4)
    parser.add_argument("--scale", type=int, default=10)
    parser.add_argument("--edge-factor", type=int, default=16)
    parser.add_argument("--vertices", type=int, default=None)
    parser.add_argument("--size", type=int, default=16)
    parser.add_argument("--density", type=float, default=0.25)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--csv", type=Path, default=None)
    parser.add_argument("--verify", action="store_true")
    parser.add_argument("--use_wandb", action="store_true")
    parser.add_argument("--wandb_project", type=str, default="forelem")
    parser.add_argument("--quiet", action="store_true")


def parse_args(argv: Optional[Sequence[str]] = None):
    parser = ArgumentParser(prog="forelem", description="forelem tuple-IR driver")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic point or edge file")
    gen.add_argument("kind", choices=["kmeans", "graph"])
    gen.add_argument("--out", type=Path, default=None)
    gen.add_argument("--n", type=int, default=1024)
    gen.add_argument("--dim", type=int, default=4)
    gen.add_argument("--k", type=int, default=4)
    gen.add_argument("--balanced", action="store_true")
    gen.add_argument("--scale", type=int, default=10)
    gen.add_argument("--edge-factor", type=int, default=16)
    gen.add_argument("--no-relabel", action="store_true")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--quiet", action="store_true")

    add_run_arguments(sub.add_parser("run", help="compose a variant, execute it and emit a CSV row"))
    add_run_arguments(sub.add_parser("sweep", help="run the cartesian product of a parameter grid"), grid=True)

    ls = sub.add_parser("list-variants", help="show built-in and configured variants")
    ls.add_argument("--variants-file", type=Path, default=None)
    ls.add_argument("--app", choices=sorted(RUNNERS), default=None)

    args = parser.parse_args(argv)
    args.seed = resolve_seed(getattr(args, "seed", None))
    return args


def write_rows(rows: list[dict], path: Optional[Path], append: bool = False):
    df = pd.DataFrame(rows)
    columns = CSV_COLUMNS + [c for c in df.columns if c not in CSV_COLUMNS]
    df = df.reindex(columns=columns)
    if path is None:
        sys.stdout.write(df.to_csv(index=False))
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = append and path.exists() and path.stat().st_size > 0
    df.to_csv(path, mode="a" if exists else "w", header=not exists, index=False)


def run_config(args, **overrides) -> RunConfig:
    fields = set(RunConfig.model_fields)
    values = {k: v for k, v in vars(args).items() if k in fields}
    values.update(overrides)
    return RunConfig(**values)


def exit_code(status: RunStatus, verified: Optional[bool]) -> int:
    if status == RunStatus.BUDGET_EXHAUSTED:
        return EXIT_NO_TERMINATION
    if verified is False:
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def cmd_generate(args, console: Console) -> int:
    if args.kind == "kmeans":
        cfg = ClusterGenConfig(n=args.n, dim=args.dim, k=args.k, seed=args.seed, balanced=args.balanced)
        points, _ = gen_clustered_points(cfg)
        out = args.out or Path(f"data/points_n{cfg.n}_d{cfg.dim}_k{cfg.k}_s{cfg.seed}.txt")
        write_points(out, points, header=f"n={cfg.n} dim={cfg.dim} k={cfg.k} seed={cfg.seed}")
        if cfg.n == 0:
            console.print("[yellow]warning: n=0, wrote an empty point file[/yellow]")
        console.print(f"wrote {cfg.n} point(s) of dim {cfg.dim} to {out} (seed {cfg.seed})")
    else:
        cfg = GraphGenConfig(scale=args.scale, edge_factor=args.edge_factor, seed=args.seed, relabel=not args.no_relabel)
        edges = gen_graph(cfg)
        out = args.out or Path(f"data/graph_s{cfg.scale}_e{cfg.edge_factor}_s{cfg.seed}.txt")
        write_edges(out, edges, header=f"vertices={cfg.vertices} edges={len(edges)} seed={cfg.seed}")
        console.print(f"wrote {len(edges)} edge(s) over {cfg.vertices} vertices to {out} (seed {cfg.seed})")
    return EXIT_OK


def cmd_run(config: RunConfig, console: Console, print_program: bool = False) -> int:
    runner = RUNNERS[config.app](config, console)
    if print_program:
        runner.log(runner.render())
    result = runner.run()
    verified = runner.eval().passed if config.verify else None
    write_rows([runner.to_row()], config.csv, append=True)
    if runner.wandb is not None:
        runner.wandb.finish()
    return exit_code(result.status, verified)


def sweep_grid(args) -> list[dict]:
    axes = {
        "variant": args.variants,
        "workers": args.workers,
        "partitions": args.partitions,
        SIZE_FIELD[args.app]: args.sizes,
        "dim": args.dims,
        "k": args.ks,
    }
    axes = {name: values for name, values in axes.items() if values}
    return [dict(zip(axes, cell)) for cell in itertools.product(*axes.values())]


def cmd_sweep(args, console: Console) -> int:
    cells = sweep_grid(args)
    if not cells:
        console.print("[red]empty sweep grid[/red]")
        return EXIT_USAGE
    quiet = Console(quiet=True)
    rows, codes = [], []
    for cell in tqdm(cells, desc="Sweeping", disable=args.quiet):
        axes = {k: v for k, v in cell.items() if k not in ("variant", "workers", "partitions")}
        row = {
            "app": args.app,
            "variant": cell.get("variant"),
            "P": cell.get("partitions", 1),
            "W": cell.get("workers", 1),
            **axes,
        }
        try:
            config = run_config(args, **cell)
            runner = RUNNERS[args.app](config, quiet)
            result = runner.run()
            verified = runner.eval().passed if config.verify else None
            row = {**runner.to_row(), **axes, "error": ""}
            codes.append(exit_code(result.status, verified))
            if runner.wandb is not None:
                runner.wandb.finish()
        except (ForelemError, ValueError, ValidationError, OSError) as e:
            row.update(error=f"{type(e).__name__}: {e}")
            console.print(f"[red]cell {cell} failed: {e}[/red]")
        rows.append(row)
    _log_scaling(rows, SIZE_FIELD[args.app], console)
    write_rows(rows, args.csv)
    failed = [c for c in codes if c != EXIT_OK]
    return max(failed, key=[EXIT_VERIFY_FAILED, EXIT_NO_TERMINATION].index) if failed else EXIT_OK


def _log_scaling(rows: list[dict], size_field: str, console: Console):
    df = pd.DataFrame([r for r in rows if not r.get("error")])
    if df.empty or df["W"].nunique() < 2:
        return
    keys = [c for c in ("variant", "P", size_field, "dim", "k") if c in df.columns]
    for key, group in df.sort_values("W").groupby(keys):
        times = group["calc_ms"].tolist()
        if any(later > earlier for earlier, later in zip(times, times[1:])):
            console.print(f"[yellow]calc time not monotone in W for {key}: {times}[/yellow]")


def cmd_list_variants(args, console: Console) -> int:
    table = Table(title="forelem variants")
    for column in ("name", "app", "pipeline", "exchange", "layout", "description"):
        table.add_column(column)
    for v in all_variants(args.variants_file).values():
        if args.app is not None and v.app != args.app:
            continue
        table.add_row(v.name, v.app, " -> ".join(v.steps) or "-", v.exchange.value, v.layout.value, v.description)
    console.print(table)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except ValueError as e:
        print(f"forelem: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    set_random_seeds(args.seed)
    console = Console(quiet=getattr(args, "quiet", False), stderr=args.command in ("run", "sweep"))
    try:
        if args.command == "generate":
            return cmd_generate(args, console)
        if args.command == "list-variants":
            return cmd_list_variants(args, console)
        if args.command == "sweep":
            return cmd_sweep(args, console)
        return cmd_run(run_config(args), console, args.print_program)
    except ValidationError as e:
        console.print(f"[red]invalid configuration:[/red] {e}")
        return EXIT_USAGE
    except UnknownVariant as e:
        console.print(f"[red]{e}[/red]")
        return EXIT_USAGE
    except (ForelemError, ValueError, OSError) as e:
        console.print(f"[red]{type(e).__name__}: {e}[/red]")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
