"""Backends that can evaluate the response likelihood under an ablated context.

Two implementations share one duck-typed contract:

* :class:`ReferenceBackend` wraps the numpy transformer.
* :class:`SurrogateBackend` is an explicit value function over subsets of
  source ids.  It simulates the token accounting of a real model, which is
  what lets the attribution engine be checked against brute-force
  enumeration.

Every likelihood evaluation reports a :class:`PassTokens` record so the
engine can do its cost bookkeeping without knowing what ran.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import model as M
from .context import Ablation, PromptLayout

TOKENIZER = "byte-v1"


class CapabilityError(RuntimeError):
    pass


class TokenizerMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BackendCapabilities:
    kv_sessions: bool = False
    attention_export: bool = False
    embedding_gradients: bool = False
    generation: bool = False


@dataclass(frozen=True)
class PassTokens:
    uncached: int
    cached: int
    context: int  # uncached tokens that belong to source spans


@dataclass
class BaseState:
    """Likelihood of the response under a full (un-ablated) layout."""

    loglik: float
    tokens: PassTokens
    session: Any = None


def pass_tokens(ablation: Ablation, response_len: int, fork: int = 0) -> PassTokens:
    n = len(ablation.tokens)
    return PassTokens(uncached=n - fork + response_len, cached=fork,
                      context=ablation.context_tokens_from(fork))


def require(backend, capability: str) -> None:
    if not getattr(backend.capabilities, capability):
        raise CapabilityError(f"backend {backend.name!r} lacks {capability}")


def check_tokenizers(a, b) -> None:
    if a.tokenizer != b.tokenizer:
        raise TokenizerMismatch(
            f"{a.name!r} uses tokenizer {a.tokenizer!r} but {b.name!r} uses {b.tokenizer!r}")


class ReferenceBackend:
    tokenizer = TOKENIZER
    capabilities = BackendCapabilities(True, True, True, True)

    def __init__(self, weights: M.ModelWeights, name: str | None = None):
        self.weights = weights
        self.name = name or weights.name

    def __repr__(self):
        return f"ReferenceBackend({self.name!r})"

    @property
    def param_count(self) -> int:
        return self.weights.param_count

    def base(self, layout: PromptLayout, response: Sequence[int], kv: bool = False) -> BaseState:
        response = list(response)
        prompt = list(layout.tokens)
        full = Ablation(layout)
        toks = pass_tokens(full, len(response))
        if not kv:
            return BaseState(M.score_continuation(self.weights, prompt, response), toks)
        session = M.session_create(self.weights, prompt)
        ll, _ = M.session_score(self.weights, session, response)
        return BaseState(ll, toks, session)

    def score(self, ablation: Ablation, response: Sequence[int],
              base: BaseState | None = None) -> tuple[float, PassTokens]:
        """Response log-likelihood under ``ablation``; reuses ``base.session`` when given."""
        response = list(response)
        tokens = ablation.tokens
        if base is None or base.session is None:
            return M.score_continuation(self.weights, tokens, response), pass_tokens(ablation, len(response))
        fork = ablation.shared_prefix
        ll, _ = M.session_score(self.weights, base.session.fork(fork), response, tail=tokens[fork:])
        return ll, pass_tokens(ablation, len(response), fork)

    def attentions(self, tokens: Sequence[int]) -> np.ndarray:
        return M.forward_attentions(self.weights, tokens)

    def embedding_gradients(self, tokens: Sequence[int], scored_span: tuple[int, int]) -> np.ndarray:
        return M.embedding_gradients(self.weights, tokens, scored_span)

    def generate(self, prompt: Sequence[int], max_new: int) -> list[int]:
        return M.greedy_generate(self.weights, prompt, max_new)


class SurrogateBackend:
    """Likelihood given directly as ``value(kept source ids)``.

    ``kv=True`` advertises KV sessions; scores are unaffected but token
    accounting then bills only what a real cache could not reuse.
    """

    def __init__(self, value: Callable[[frozenset], float], name: str = "surrogate",
                 param_count: int = 1, kv: bool = True, tokenizer: str = TOKENIZER):
        self.value = value
        self.name = name
        self.param_count = param_count
        self.tokenizer = tokenizer
        self.capabilities = BackendCapabilities(kv_sessions=kv)

    def __repr__(self):
        return f"SurrogateBackend({self.name!r})"

    @classmethod
    def additive(cls, weights: Sequence[float], bias: float = 0.0, **kw) -> "SurrogateBackend":
        w = [float(x) for x in weights]

        def value(ids):
            return bias + sum(w[i] for i in sorted(ids))

        kw.setdefault("name", "additive")
        return cls(value, **kw)

    def base(self, layout: PromptLayout, response: Sequence[int], kv: bool = False) -> BaseState:
        full = Ablation(layout)
        return BaseState(float(self.value(full.kept_ids)), pass_tokens(full, len(response)),
                         session=True if kv else None)

    def score(self, ablation: Ablation, response: Sequence[int],
              base: BaseState | None = None) -> tuple[float, PassTokens]:
        fork = ablation.shared_prefix if base is not None and base.session is not None else 0
        return float(self.value(ablation.kept_ids)), pass_tokens(ablation, len(response), fork)
