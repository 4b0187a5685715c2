"""Acceleration cascade: hierarchical attribution, proxy models, proxy pruning.

Methods that score only part of the context still return one score per
source.  Sources that were dropped before the final scoring stage get
sentinel scores below every retained score (see :func:`fill_unretained`),
ordered by whatever earlier stage dropped them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backends import check_tokenizers
from .context import PromptLayout
from .core import AttributionError, AttributionScores, BaseCache, CostRecord, leave_group_out, loo


def _n_keep(fraction: float, total: int, min_keep: int) -> int:
    # small slack so 0.3 * 10 keeps 3, not 4
    return min(total, max(min_keep, math.ceil(fraction * total - 1e-9)))


@dataclass(frozen=True)
class HierParams:
    beta: float = 0.5
    min_keep: int = 1

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.min_keep < 1:
            raise ValueError("min_keep must be at least 1")

    def kept(self, n_groups: int) -> int:
        return _n_keep(self.beta, n_groups, self.min_keep)


@dataclass(frozen=True)
class PruneParams:
    alpha: float = 0.5
    min_keep: int = 1

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.min_keep < 1:
            raise ValueError("min_keep must be at least 1")

    def kept(self, n_sources: int) -> int:
        return _n_keep(self.alpha, n_sources, self.min_keep)


def top_k(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` highest scores; earlier index wins ties."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def fill_unretained(n: int, retained: Sequence[int], retained_scores: Sequence[float],
                    order_key: Sequence[float]) -> np.ndarray:
    """Full score vector with sentinels for sources outside ``retained``.

    Unretained sources are ranked among themselves by ``order_key``
    (descending, earlier index first) and placed on a ladder strictly below
    the smallest retained score.
    """
    out = np.empty(n, dtype=np.float64)
    out[list(retained)] = retained_scores
    rest = [i for i in range(n) if i not in set(retained)]
    if not rest:
        return out
    lo = float(np.min(retained_scores))
    step = max(1e-3, abs(lo) * 1e-6)
    for rank, i in enumerate(sorted(rest, key=lambda i: (-order_key[i], i))):
        out[i] = lo - step * (rank + 1)
    return out


def hierarchical(backend, layout: PromptLayout, response: Sequence[int], params: HierParams = HierParams(),
                 kv: bool = False, bases: BaseCache | None = None) -> AttributionScores:
    """Score groups, keep the top groups, then score sources of the shortened context."""
    bases = BaseCache() if bases is None else bases
    groups = layout.grouping
    if not groups:
        raise AttributionError("layout has no source groups")
    stage1 = leave_group_out(backend, layout, response, groups, kv=kv, bases=bases)
    kept_groups = top_k(stage1.scores, params.kept(len(groups)))
    retained = sorted(i for g in kept_groups for i in groups[g])
    sub = layout.keep(retained)
    stage2 = loo(backend, sub, response, kv=kv, bases=bases, stage="hier-sources")

    group_of = {i: g for g, members in enumerate(groups) for i in members}
    key = [stage1.scores[group_of[i]] for i in range(layout.n_sources)]
    scores = fill_unretained(layout.n_sources, retained, stage2.scores, key)
    cost = CostRecord(stage1.cost.stages + stage2.cost.stages)
    return AttributionScores(
        scores, "hier", {"beta": params.beta, "min_keep": params.min_keep, "kv": kv}, cost,
        {"model": backend.name, "group_scores": stage1.scores.tolist(),
         "kept_groups": kept_groups, "retained": retained})


def proxy_attribute(proxy, layout: PromptLayout, response: Sequence[int], target=None,
                    kv: bool | None = None, bases: BaseCache | None = None) -> AttributionScores:
    """LOO under ``proxy`` for the target's response."""
    if target is not None:
        check_tokenizers(target, proxy)
    if kv is None:
        kv = proxy.capabilities.kv_sessions
    res = loo(proxy, layout, response, kv=kv, bases=bases, stage="proxy-kv" if kv else "proxy")
    res.method = "proxy"
    res.params = {"kv": kv}
    res.meta["proxy"] = proxy.name
    return res


def proxy_prune(target, proxy, layout: PromptLayout, response: Sequence[int],
                params: PruneParams = PruneParams(), kv: bool = False,
                bases: BaseCache | None = None, selection: AttributionScores | None = None
                ) -> AttributionScores:
    """Proxy scores every source; the target re-scores only the top ones.

    ``selection`` overrides the proxy LOO stage with precomputed scores
    (used by pipelines that select with a hierarchical proxy pass).
    """
    check_tokenizers(target, proxy)
    bases = BaseCache() if bases is None else bases
    if selection is None:
        selection = loo(proxy, layout, response, kv=kv and proxy.capabilities.kv_sessions,
                        bases=bases, stage="prune-proxy")
    retained = top_k(selection.scores, params.kept(layout.n_sources))
    sub = layout.keep(retained)
    final = loo(target, sub, response, kv=kv and target.capabilities.kv_sessions, bases=bases,
                stage="prune-target")
    scores = fill_unretained(layout.n_sources, retained, final.scores, selection.scores)
    cost = CostRecord(selection.cost.stages + final.cost.stages)
    return AttributionScores(
        scores, "prune", {"alpha": params.alpha, "min_keep": params.min_keep, "kv": kv}, cost,
        {"model": target.name, "proxy": proxy.name, "retained": retained,
         "proxy_scores": selection.scores.tolist()})


STAGES = ("kv", "proxy", "prune", "hierarchical")
_ALIASES = {"hier": "hierarchical", "pruning": "prune"}


@dataclass(frozen=True)
class PipelineSpec:
    """Stages drawn from kv / proxy / prune / hierarchical plus their parameters.

    ``prune`` implies a proxy model.  Stages always execute in a canonical
    order whatever order they are listed in.
    """

    stages: tuple[str, ...]
    alpha: float = 0.5
    beta: float = 0.5
    min_keep: int = 1
    raw: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        names = [_ALIASES.get(s, s) for s in self.stages]
        unknown = [s for s in names if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown pipeline stage(s): {unknown}")
        if not names:
            raise ValueError("pipeline needs at least one stage")
        for s in set(names):
            if names.count(s) > 1:
                raise ValueError(f"stage {s!r} listed more than once")
        object.__setattr__(self, "stages", tuple(s for s in STAGES if s in names))
        HierParams(self.beta, self.min_keep)
        PruneParams(self.alpha, self.min_keep)

    @property
    def uses_proxy(self) -> bool:
        return "proxy" in self.stages or "prune" in self.stages

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        stages = d["stages"]
        if isinstance(stages, str):
            stages = [s.strip() for s in stages.split(",") if s.strip()]
        return cls(tuple(stages), float(d.get("alpha", 0.5)), float(d.get("beta", 0.5)),
                   int(d.get("min_keep", 1)), raw=dict(d))

    def to_dict(self) -> dict:
        return {"stages": list(self.stages), "alpha": self.alpha, "beta": self.beta,
                "min_keep": self.min_keep}


def run_pipeline(spec: PipelineSpec, target, proxy, layout: PromptLayout,
                 response: Sequence[int], bases: BaseCache | None = None) -> AttributionScores:
    """Execute a composed pipeline.

    Selection (hierarchical and/or the proxy's source scoring) runs first;
    when ``prune`` is present the target re-scores the retained sources
    last.  KV caching applies on every backend that supports it when ``kv``
    is listed.
    """
    if spec.uses_proxy and proxy is None:
        raise ValueError("pipeline references a proxy model but none was given")
    if not spec.uses_proxy and proxy is not None:
        raise ValueError("proxy model given but the pipeline does not use one")
    if proxy is not None:
        check_tokenizers(target, proxy)
    bases = BaseCache() if bases is None else bases
    selector = proxy if spec.uses_proxy else target
    kv = "kv" in spec.stages

    def kv_for(backend):
        return kv and backend.capabilities.kv_sessions

    if "hierarchical" in spec.stages:
        res = hierarchical(selector, layout, response, HierParams(spec.beta, spec.min_keep),
                           kv=kv_for(selector), bases=bases)
    else:
        res = loo(selector, layout, response, kv=kv_for(selector), bases=bases,
                  stage=("prune-proxy" if "prune" in spec.stages else "proxy") if spec.uses_proxy else None)
    if "prune" in spec.stages:
        res = proxy_prune(target, proxy, layout, response, PruneParams(spec.alpha, spec.min_keep),
                          kv=kv, bases=bases, selection=res)
    res.method = "pipeline"
    res.params = spec.to_dict()
    res.meta["model"] = target.name
    if proxy is not None:
        res.meta["proxy"] = proxy.name
    return res
