from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

DEFAULT_SEED = 42

AppName = Literal["kmeans", "pagerank", "matmul", "sort"]
SchedulerName = Literal["in_order", "shuffled", "random"]
LayoutName = Literal["aos", "soa", "jagged"]
ExchangeName = Literal["buffered", "master", "indirect"]


class ClusterGenConfig(BaseModel):
    """Clustered point generator: centres uniform in ``center_range``, per-cluster sigma in ``sigma_range``."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(1024, ge=0)
    dim: int = Field(4, ge=1)
    k: int = Field(4, ge=1)
    seed: int = DEFAULT_SEED
    center_range: tuple[float, float] = (0.0, 10.0)
    sigma_range: tuple[float, float] = (10 / 16, 10 / 8)
    balanced: bool = False

    @model_validator(mode="after")
    def check_sizes(self):
        if 0 < self.n < self.k:
            raise ValueError(f"need n >= k, got n={self.n}, k={self.k}")
        for lo, hi in (self.center_range, self.sigma_range):
            if lo > hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        if self.sigma_range[0] < 0:
            raise ValueError("sigma must be non-negative")
        return self


class GraphGenConfig(BaseModel):
    """Recursive-matrix graph generator with ``2**scale`` vertices and ``edge_factor`` edges per vertex."""

    model_config = ConfigDict(frozen=True)

    scale: int = Field(10, ge=0, le=30)
    edge_factor: int = Field(16, ge=0)
    probabilities: tuple[float, float, float, float] = (0.57, 0.19, 0.19, 0.05)
    seed: int = DEFAULT_SEED
    relabel: bool = True

    @model_validator(mode="after")
    def check_probabilities(self):
        if any(p < 0 for p in self.probabilities):
            raise ValueError("probabilities must be non-negative")
        if abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {sum(self.probabilities)}")
        return self

    @property
    def vertices(self) -> int:
        return 1 << self.scale


class RunConfig(BaseModel):
    app: AppName
    variant: Optional[str] = None
    input: Optional[Path] = None
    variants_file: Optional[Path] = None

    partitions: int = Field(1, ge=1)
    workers: int = Field(1, ge=1)
    sweeps_per_exchange: int = Field(1, ge=1)
    max_sweeps: int = Field(10_000, ge=1)
    scheduler: SchedulerName = "in_order"
    batch: Optional[int] = Field(None, ge=1)
    layout: Optional[LayoutName] = None
    exchange: Optional[ExchangeName] = None

    epsilon: Optional[float] = Field(None, ge=0)
    damping: float = Field(0.85, gt=0, lt=1)
    convergence_delta: float = Field(0.0, ge=0)
    threshold: Optional[float] = Field(None, ge=0, le=1)
    k: int = Field(4, ge=1)
    # vertex count of an --input edge list
    vertices: Optional[int] = Field(None, ge=0)

    # generator parameters when no input file is given
    n: int = Field(4096, ge=0)
    dim: int = Field(4, ge=1)
    scale: int = Field(10, ge=0, le=30)
    edge_factor: int = Field(16, ge=0)
    size: int = Field(16, ge=1)
    density: float = Field(0.25, gt=0, le=1)

    seed: int = DEFAULT_SEED
    csv: Optional[Path] = None
    verify: bool = False
    use_wandb: bool = False
    wandb_project: str = "forelem"
    quiet: bool = False

    def cluster_gen(self) -> ClusterGenConfig:
        return ClusterGenConfig(n=self.n, dim=self.dim, k=self.k, seed=self.seed)

    def graph_gen(self) -> GraphGenConfig:
        return GraphGenConfig(scale=self.scale, edge_factor=self.edge_factor, seed=self.seed)

    @property
    def wandb_run_name(self) -> str:
        return f"{self.app}-{self.variant}-P{self.partitions}-W{self.workers}-seed{self.seed}"


class VariantConfig(BaseModel):
    """A user-defined variant: pipeline steps as strings, e.g. ``["orthogonalize(x)", "split(x)"]``."""

    name: str
    app: AppName
    pipeline: list[str] = Field(default_factory=list)
    exchange: ExchangeName = "buffered"
    layout: LayoutName = "aos"
    master_id: int = Field(0, ge=0)
    description: str = ""


class VariantFile(BaseModel):
    variants: list[VariantConfig] = Field(default_factory=list)
