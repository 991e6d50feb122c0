"""
Named transformation pipelines.

Built-in variants mirror the hand-derived forms of each application.
Further variants can be loaded from a JSON file whose pipeline steps are
written as strings, e.g. ``"orthogonalize(x)"`` or ``"localize(OLD, as=old)"``.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from .config import VariantConfig, VariantFile
from .errors import UnknownVariant
from .exchange import ExchangeKind
from .layout import Layout
from .transforms import (
    Concretize,
    Interchange,
    Localize,
    Materialize,
    Orthogonalize,
    ReduceReservoir,
    SplitByRange,
    SplitByValue,
    SubsetSpec,
    Transformation,
    Variant,
)

_MATMUL_PIPELINE = (
    Localize("A", "a"),
    Orthogonalize("j", 0, "j"),
    Orthogonalize("i", 1, "i"),
    Materialize(2, "kk"),
    Interchange(1, 2),
)


def _builtins() -> dict[str, Variant]:
    variants = [
        Variant("Kmeans_base", "kmeans", description="unsplit whilelem over ⟨m,x⟩"),
        Variant(
            "Kmeans_1",
            "kmeans",
            (Orthogonalize("x"), SplitByValue("x")),
            ExchangeKind.BUFFERED,
            description="orthogonalized on x, split on x, buffered exchange",
        ),
        Variant(
            "Kmeans_2",
            "kmeans",
            (Orthogonalize("x"), SplitByValue("x")),
            ExchangeKind.INDIRECT,
            description="orthogonalized on x, split on x, indirect exchange",
        ),
        Variant(
            "Kmeans_3",
            "kmeans",
            (Orthogonalize("x"), SplitByValue("x"), Localize("COORDS", "p_x"), Localize("M", "c_x")),
            ExchangeKind.INDIRECT,
            description="localized COORDS and M, indirect exchange",
        ),
        Variant(
            "Kmeans_4",
            "kmeans",
            (Orthogonalize("x"), SplitByValue("x"), Localize("COORDS", "p_x"), Localize("M", "c_x")),
            ExchangeKind.BUFFERED,
            description="localized COORDS and M, buffered exchange",
        ),
        Variant("PageRank_base", "pagerank", description="unsplit whilelem over expanded edges"),
        Variant("PageRank_1", "pagerank", (SplitByValue("u"),), description="edges split on source"),
        Variant(
            "PageRank_2",
            "pagerank",
            (Orthogonalize("v", binder="w"), SplitByValue("v"), Localize("OLD", "old"), Materialize()),
            description="orthogonalized and split on target, OLD localized, materialized",
        ),
        Variant(
            "PageRank_3",
            "pagerank",
            (Orthogonalize("v", binder="w"), Localize("OLD", "old"), SplitByValue("v")),
            description="orthogonalized on target, OLD localized, then split",
        ),
        Variant(
            "PageRank_4",
            "pagerank",
            (Orthogonalize("v", binder="w"), SplitByValue("v")),
            description="orthogonalized and split on target",
        ),
        Variant(
            "PageRank_TRR",
            "pagerank",
            (ReduceReservoir(), SplitByValue("u")),
            description="dangling fan-out reduced to stubs, split on source",
        ),
        Variant("Matmul_base", "matmul", description="forelem over nonzero products"),
        Variant("Matmul_AoS", "matmul", _MATMUL_PIPELINE, layout=Layout.AOS, description="interchanged nest, records"),
        Variant("Matmul_SoA", "matmul", _MATMUL_PIPELINE, layout=Layout.SOA, description="interchanged nest, columns"),
        Variant(
            "Matmul_JD",
            "matmul",
            _MATMUL_PIPELINE + (Concretize(Layout.JAGGED),),
            layout=Layout.JAGGED,
            description="interchanged nest, jagged-diagonal storage",
        ),
        Variant(
            "Sort_adjacent",
            "sort",
            description="swap guard over neighbouring pairs",
            options=(("adjacent_only", True),),
        ),
        Variant(
            "Sort_all_pairs",
            "sort",
            description="swap guard over every pair i < j",
            options=(("adjacent_only", False),),
        ),
    ]
    return {v.name: v for v in variants}


BUILTIN_VARIANTS: dict[str, Variant] = _builtins()

DEFAULT_VARIANTS = {
    "kmeans": "Kmeans_base",
    "pagerank": "PageRank_base",
    "matmul": "Matmul_base",
    "sort": "Sort_adjacent",
}

_STEP = re.compile(r"^\s*(?P<name>[a-z_]+)\s*(?:\((?P<args>.*)\))?\s*$")


def _split_args(text: Optional[str]) -> tuple[list[str], dict[str, str]]:
    positional, named = [], {}
    for part in filter(None, (p.strip() for p in (text or "").split(","))):
        if "=" in part:
            key, value = (s.strip() for s in part.split("=", 1))
            named[key] = value
        else:
            positional.append(part)
    return positional, named


def parse_step(text: str) -> Transformation:
    """Parse one pipeline step such as ``"orthogonalize(i, level=1, binder=i)"``."""
    match = _STEP.match(text)
    if match is None:
        raise ValueError(f"malformed pipeline step {text!r}")
    name = match["name"]
    args, kw = _split_args(match["args"])

    def need(n: int) -> None:
        if len(args) != n:
            raise ValueError(f"{name} takes {n} positional argument(s), got {text!r}")

    if name == "orthogonalize":
        need(1)
        return Orthogonalize(args[0], int(kw.get("level", 0)), kw.get("binder"))
    if name in ("split", "split_value"):
        need(1)
        return SplitByValue(args[0], int(kw["parts"]) if "parts" in kw else None)
    if name == "split_range":
        need(1)
        return SplitByRange(args[0], int(kw["parts"]) if "parts" in kw else None)
    if name == "localize":
        need(1)
        return Localize(args[0], kw.get("as"))
    if name == "materialize":
        need(0)
        level = int(kw["level"]) if "level" in kw else None
        return Materialize(level, kw.get("binder", "i"))
    if name == "reduce":
        kind = args[0] if args else "dangling"
        if kind != "dangling":
            raise ValueError(f"unknown subset family {kind!r}")
        return ReduceReservoir(SubsetSpec(arbitrary=kw.get("arbitrary", "false").lower() == "true"))
    if name == "interchange":
        need(2)
        return Interchange(int(args[0]), int(args[1]))
    if name == "concretize":
        need(1)
        return Concretize(Layout(args[0]))
    raise ValueError(f"unknown pipeline step {name!r}")


def variant_from_config(cfg: VariantConfig) -> Variant:
    return Variant(
        cfg.name,
        cfg.app,
        tuple(parse_step(s) for s in cfg.pipeline),
        ExchangeKind(cfg.exchange),
        Layout(cfg.layout),
        cfg.description,
        cfg.master_id,
    )


def load_variants(path: str | Path) -> dict[str, Variant]:
    """Variants defined in a JSON file; an empty file defines none."""
    text = Path(path).read_text()
    if not text.strip():
        return {}
    try:
        spec = VariantFile.model_validate_json(text)
    except ValidationError as e:
        raise ValueError(f"invalid variants file {path}: {e}") from e
    return {cfg.name: variant_from_config(cfg) for cfg in spec.variants}


def all_variants(path: str | Path | None = None) -> dict[str, Variant]:
    variants = dict(BUILTIN_VARIANTS)
    if path is not None:
        variants.update(load_variants(path))
    return variants


def get_variant(name: Optional[str], app: str, path: str | Path | None = None) -> Variant:
    """Look up a variant by name (the app's default when ``name`` is None)."""
    variants = all_variants(path)
    name = name or DEFAULT_VARIANTS[app]
    if name not in variants:
        raise UnknownVariant(f"unknown variant {name!r}; known: {', '.join(sorted(variants))}")
    v = variants[name]
    if v.app != app:
        raise UnknownVariant(f"variant {name!r} belongs to app {v.app!r}, not {app!r}")
    return v
