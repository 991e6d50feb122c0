import dataclasses
import time
from typing import Optional

import numpy as np
import scipy.sparse as sp
from rich.console import Console

from dataset import EdgeDataset, PointDataset
from datagen import gen_clustered_points, gen_graph
from evaluator import KMeansVerifier, MatmulVerifier, PageRankVerifier, SortVerifier, Verifier, VerifyResult
from forelem.apps import (
    KMeansProblem,
    PageRankProblem,
    build_kmeans_spec,
    build_matmul_spec,
    build_pagerank_spec,
    build_sort_spec,
    init_kmeans,
    init_matmul,
    init_pagerank,
    init_sort,
    kmeans_early_stop,
)
from forelem.config import RunConfig
from forelem.exchange import ExchangeKind, ExchangeScheme
from forelem.executor import (
    EarlyStop,
    ExchangeEvent,
    PartitionedResult,
    SchedulePolicy,
    Scheduler,
    build_partitions,
    run_partitioned,
)
from forelem.ir import Program, render
from forelem.transforms import Composition, Variant, compose
from forelem.variants import get_variant

CSV_COLUMNS = ["app", "variant", "P", "W", "sweeps", "guards_fired", "state_changes", "calc_ms", "verify", "residual"]


class RunnerBase:
    app: str = ""
    verifier_cls: type[Verifier] = Verifier

    def __init__(self, config: RunConfig, console: Optional[Console] = None):
        self.config = config
        self.console = console
        self.result: Optional[PartitionedResult] = None
        self.verification: Optional[VerifyResult] = None
        self.calc_ms = 0.0
        self.setup_environment()
        self.setup_problem()
        self.setup_program()
        self.setup_verifier()

    def setup_environment(self):
        if self.console is None:
            self.console = Console(quiet=self.config.quiet, stderr=True)
        if self.config.use_wandb:
            import wandb

            wandb.init(project=self.config.wandb_project, name=self.config.wandb_run_name, config=self.config.model_dump(mode="json"))
            self.wandb = wandb
        else:
            self.wandb = None

    def log(self, content):
        self.console.print(content)

    def setup_problem(self):
        raise NotImplementedError

    def build_program(self, variant: Variant) -> Program:
        raise NotImplementedError

    def initial_spaces(self) -> dict:
        raise NotImplementedError

    def early_stop(self, initial: dict) -> Optional[EarlyStop]:
        return None

    def setup_program(self):
        variant = get_variant(self.config.variant, self.app, self.config.variants_file)
        if self.config.exchange is not None:
            variant = dataclasses.replace(variant, exchange=ExchangeKind(self.config.exchange))
        self.variant = variant
        self.base = self.build_program(variant)
        self.composition: Composition = compose(self.base, variant, self.config.partitions, self.config.layout)
        self.log(
            f"Variant {variant.name}: {' -> '.join(variant.steps) or 'base'} "
            f"({self.composition.partitions} partition(s), {self.composition.layout.value}, {variant.exchange.value})"
        )
        if self.composition.partitions != self.config.partitions:
            self.log(f"[yellow]{variant.name} does not split; running {self.composition.partitions} partition(s)[/yellow]")

    def setup_verifier(self):
        self.verifier = self.verifier_cls(self)

    def scheduler(self) -> Scheduler:
        return Scheduler(SchedulePolicy(self.config.scheduler), self.config.seed, self.config.batch)

    def on_exchange(self, event: ExchangeEvent):
        if self.wandb is not None and event.phase == "after":
            self.wandb.log({"round": event.round, **event.counters.to_row()})

    def run(self) -> PartitionedResult:
        """Initialize shared spaces and execute; only this phase is timed."""
        comp = self.composition
        start = time.perf_counter()
        initial = self.initial_spaces()
        parts = build_partitions(comp.programs, initial, comp.layout, seed=self.config.seed)
        self.result = run_partitioned(
            comp.merged,
            parts,
            ExchangeScheme(self.variant.exchange, self.variant.master_id),
            workers=self.config.workers,
            sweeps_per_exchange=self.config.sweeps_per_exchange,
            max_rounds=self.config.max_sweeps,
            scheduler=self.scheduler(),
            early_stop=self.early_stop(initial),
            on_exchange=self.on_exchange,
            layout=comp.layout,
            variant=self.variant.name,
        )
        self.calc_ms = (time.perf_counter() - start) * 1000
        stats = self.result.stats
        self.log(
            f"{self.variant.name}: {stats.status.value} after {stats.sweeps} sweep(s), "
            f"{stats.rounds} round(s), {stats.state_changes} change(s), calc {self.calc_ms:.1f} ms"
        )
        if self.wandb is not None:
            self.wandb.log({"calc_ms": self.calc_ms, "sweeps": stats.sweeps, "state_changes": stats.state_changes})
        return self.result

    def eval(self) -> VerifyResult:
        """Verify the finished run against the app's oracle"""
        self.verification = self.verifier.eval()
        return self.verification

    def to_row(self) -> dict:
        stats = self.result.stats
        row = {
            "app": self.app,
            "variant": self.variant.name,
            "P": self.composition.partitions,
            "W": self.config.workers,
            "sweeps": stats.sweeps,
            "guards_fired": stats.guards_fired,
            "state_changes": stats.state_changes,
            "calc_ms": round(self.calc_ms, 3),
            "verify": self.verification.label if self.verification else "",
            "residual": self.verification.residual if self.verification else np.nan,
        }
        extras = stats.to_row()
        for key in ("variant", "partitions", "workers", "sweeps", "guards_fired", "state_changes"):
            extras.pop(key)
        row.update(extras)
        row.update(layout=self.composition.layout.value, scheduler=self.config.scheduler, seed=self.config.seed)
        return row

    def render(self) -> str:
        return render(self.composition.programs[0])


class KMeansRunner(RunnerBase):
    app = "kmeans"
    verifier_cls = KMeansVerifier

    def setup_problem(self):
        cfg = self.config
        if cfg.input is not None:
            points = PointDataset(cfg.input).samples
            self.log(f"Loaded {len(points)} point(s) from {cfg.input}")
        else:
            points, _ = gen_clustered_points(cfg.cluster_gen())
        self.problem = KMeansProblem(points, cfg.k, cfg.seed, cfg.convergence_delta, cfg.threshold)
        self.log(f"k-Means: n={self.problem.n} dim={self.problem.dim} k={self.problem.k}")

    def build_program(self, variant):
        return build_kmeans_spec(self.problem)

    def initial_spaces(self):
        return init_kmeans(self.problem)

    def early_stop(self, initial):
        return kmeans_early_stop(self.problem, initial)


class PageRankRunner(RunnerBase):
    app = "pagerank"
    verifier_cls = PageRankVerifier

    def setup_problem(self):
        cfg = self.config
        kwargs = {"damping": cfg.damping}
        if cfg.epsilon is not None:
            kwargs["epsilon"] = cfg.epsilon
        if cfg.input is not None:
            data = EdgeDataset(cfg.input, cfg.vertices)
            self.problem = PageRankProblem.from_edges(data.samples, data.vertices, **kwargs)
        else:
            gen = cfg.graph_gen()
            self.problem = PageRankProblem(gen.vertices, gen_graph(gen), **kwargs)
        self.log(f"PageRank: {self.problem.vertices} vertices, {len(self.problem.edges)} edges")

    def build_program(self, variant):
        return build_pagerank_spec(self.problem)

    def initial_spaces(self):
        return init_pagerank(self.problem)


class MatmulRunner(RunnerBase):
    app = "matmul"
    verifier_cls = MatmulVerifier

    def setup_problem(self):
        cfg = self.config
        if cfg.input is not None:
            raise ValueError("matmul generates its operands; --input is not supported")
        rng = np.random.default_rng(cfg.seed)

        def operand():
            return sp.random(
                cfg.size,
                cfg.size,
                density=cfg.density,
                format="csr",
                random_state=rng,
                data_rvs=lambda k: rng.integers(1, 10, size=k).astype(np.float64),
            )

        self.problem = (operand(), operand())
        self.log(f"Matmul: {cfg.size}x{cfg.size}, nnz {self.problem[0].nnz} and {self.problem[1].nnz}")

    def build_program(self, variant):
        return build_matmul_spec(*self.problem)

    def initial_spaces(self):
        return init_matmul(*self.problem)


class SortRunner(RunnerBase):
    app = "sort"
    verifier_cls = SortVerifier

    def setup_problem(self):
        cfg = self.config
        if cfg.input is not None:
            self.problem = PointDataset(cfg.input).samples.ravel()
        else:
            self.problem = np.random.default_rng(cfg.seed).integers(0, 1000, size=cfg.size).astype(np.float64)
        self.log(f"Sort: {len(self.problem)} element(s)")

    def build_program(self, variant):
        return build_sort_spec(self.problem, variant.option("adjacent_only", True))

    def initial_spaces(self):
        return init_sort(self.problem)


RUNNERS: dict[str, type[RunnerBase]] = {
    "kmeans": KMeansRunner,
    "pagerank": PageRankRunner,
    "matmul": MatmulRunner,
    "sort": SortRunner,
}
