"""Leave-one-out and leave-group-out attribution over any backend."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .backends import BaseState, require
from .context import Ablation, PromptLayout


class AttributionError(ValueError):
    pass


@dataclass
class StageCost:
    stage: str
    model: str
    param_count: int
    passes: int = 0
    uncached_tokens: int = 0
    cached_tokens: int = 0
    context_tokens: int = 0
    base_passes: int = 0
    base_tokens: int = 0
    base_context_tokens: int = 0
    wall_ns: int = 0

    def add(self, tokens, base: bool = False) -> None:
        if base:
            self.base_passes += 1
            self.base_tokens += tokens.uncached
            self.base_context_tokens += tokens.context
        else:
            self.passes += 1
            self.uncached_tokens += tokens.uncached
            self.cached_tokens += tokens.cached
            self.context_tokens += tokens.context


@dataclass
class CostRecord:
    """Per-stage pass and token counts.

    ``passes`` counts ablated-context evaluations; the likelihood under each
    full context is tracked apart as ``base_passes``.
    """

    stages: list[StageCost] = field(default_factory=list)

    def _sum(self, attr: str) -> int:
        return sum(getattr(s, attr) for s in self.stages)

    passes = property(lambda self: self._sum("passes"))
    uncached_tokens = property(lambda self: self._sum("uncached_tokens"))
    cached_tokens = property(lambda self: self._sum("cached_tokens"))
    context_tokens = property(lambda self: self._sum("context_tokens"))
    base_passes = property(lambda self: self._sum("base_passes"))
    base_tokens = property(lambda self: self._sum("base_tokens"))
    wall_ns = property(lambda self: self._sum("wall_ns"))

    @property
    def evaluations(self) -> int:
        return self.passes + self.base_passes

    def extend(self, other: "CostRecord") -> "CostRecord":
        self.stages.extend(other.stages)
        return self

    def to_dict(self, include_time: bool = True) -> dict:
        stages = []
        for s in self.stages:
            d = asdict(s)
            if not include_time:
                d.pop("wall_ns")
            stages.append(d)
        return {"stages": stages}

    @classmethod
    def from_dict(cls, d: dict) -> "CostRecord":
        return cls([StageCost(**s) for s in d["stages"]])


@dataclass
class AttributionScores:
    scores: np.ndarray
    method: str
    params: dict[str, Any] = field(default_factory=dict)
    cost: CostRecord = field(default_factory=CostRecord)
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scores)

    def ranking(self) -> list[int]:
        """Source indices by descending score, earlier index first on ties."""
        return sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], i))


class BaseCache(dict):
    """Full-context likelihoods keyed by (backend, prompt, response).

    Shared within one attribution run so a context is never scored twice.
    """

    def get_base(self, backend, layout: PromptLayout, response, kv: bool, stage: StageCost) -> BaseState:
        key = (id(backend), layout.tokens, tuple(response))
        hit = self.get(key)
        if hit is not None and (hit.session is not None or not kv):
            return hit
        base = backend.base(layout, response, kv=kv)
        stage.add(base.tokens, base=True)
        self[key] = base
        return base


def _check(layout: PromptLayout, response: Sequence[int]) -> None:
    if layout.n_sources == 0:
        raise AttributionError("context has no sources")
    if len(response) == 0:
        raise AttributionError("response must be non-empty")


def ablation_scores(backend, layout: PromptLayout, response: Sequence[int],
                    removals: Iterable[Iterable[int]], kv: bool, stage: str,
                    bases: BaseCache | None = None) -> tuple[np.ndarray, StageCost]:
    """``base - ablated`` log-likelihood for each removal set."""
    _check(layout, response)
    response = tuple(response)
    if kv:
        require(backend, "kv_sessions")
    bases = BaseCache() if bases is None else bases
    cost = StageCost(stage, backend.name, int(backend.param_count))
    t0 = time.perf_counter_ns()
    base = bases.get_base(backend, layout, response, kv, cost)
    out = []
    for removed in removals:
        ll, toks = backend.score(Ablation(layout, frozenset(removed)), response, base if kv else None)
        cost.add(toks)
        out.append(base.loglik - ll)
    cost.wall_ns = time.perf_counter_ns() - t0
    return np.asarray(out, dtype=np.float64), cost


def loo(backend, layout: PromptLayout, response: Sequence[int], kv: bool = False,
        bases: BaseCache | None = None, stage: str | None = None) -> AttributionScores:
    stage = stage or ("loo-kv" if kv else "loo")
    scores, cost = ablation_scores(backend, layout, response,
                                   ([i] for i in range(layout.n_sources)), kv, stage, bases)
    return AttributionScores(scores, "kv" if kv else "loo", {}, CostRecord([cost]),
                             {"model": backend.name})


def loo_exact(backend, layout: PromptLayout, response: Sequence[int],
              bases: BaseCache | None = None) -> AttributionScores:
    """Drop in response log-likelihood when each source is removed; |C| + 1 evaluations."""
    return loo(backend, layout, response, kv=False, bases=bases)


def loo_kv(backend, layout: PromptLayout, response: Sequence[int],
           bases: BaseCache | None = None) -> AttributionScores:
    """Same scores as :func:`loo_exact`, reusing the cached prefix before each removed source."""
    return loo(backend, layout, response, kv=True, bases=bases)


def validate_grouping(grouping: Sequence[Sequence[int]], n: int) -> tuple[tuple[int, ...], ...]:
    flat = [i for g in grouping for i in g]
    if any(len(g) == 0 for g in grouping) or sorted(flat) != list(range(n)):
        raise AttributionError(f"grouping is not a partition of {n} sources")
    return tuple(tuple(g) for g in grouping)


def leave_group_out(backend, layout: PromptLayout, response: Sequence[int],
                    grouping: Sequence[Sequence[int]] | None = None, kv: bool = False,
                    bases: BaseCache | None = None) -> AttributionScores:
    """One score per group: base minus the likelihood with the whole group removed."""
    grouping = validate_grouping(layout.grouping if grouping is None else grouping, layout.n_sources)
    scores, cost = ablation_scores(backend, layout, response, grouping, kv,
                                   "groups-kv" if kv else "groups", bases)
    return AttributionScores(scores, "leave_group_out", {"grouping": [list(g) for g in grouping]},
                             CostRecord([cost]), {"model": backend.name})
