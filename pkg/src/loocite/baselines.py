"""Comparison attribution methods: attention mass, gradient norm,
embedding similarity and a ContextCite-style linear surrogate."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from . import model as M
from .backends import require
from .context import Ablation, PromptLayout, detokenize
from .core import AttributionError, AttributionScores, CostRecord, StageCost, _check


def attention_attribution(backend, layout: PromptLayout, response: Sequence[int]) -> AttributionScores:
    """Attention mass each source receives while the response is generated.

    Sums over layers, heads and every query position whose output predicts
    a response token (the last prompt position through the second-to-last
    response position).
    """
    require(backend, "attention_export")
    _check(layout, response)
    tokens = list(layout.tokens) + list(response)
    attn = backend.attentions(tokens[:-1])
    n_prompt = len(layout.tokens)
    rows = attn[:, :, n_prompt - 1:n_prompt - 1 + len(response), :]
    per_key = rows.astype(np.float64).sum(axis=(0, 1, 2))
    scores = np.array([per_key[a:b].sum() for a, b in layout.spans])
    return AttributionScores(scores, "attention", {}, CostRecord(),
                             {"model": backend.name, "total_mass": float(per_key.sum())})


def gradnorm_attribution(backend, layout: PromptLayout, response: Sequence[int]) -> AttributionScores:
    """Frobenius norm of the response log-likelihood gradient over each source's embeddings."""
    require(backend, "embedding_gradients")
    _check(layout, response)
    tokens = list(layout.tokens) + list(response)
    n_prompt = len(layout.tokens)
    grads = backend.embedding_gradients(tokens, (n_prompt, len(tokens))).astype(np.float64)
    scores = np.array([np.linalg.norm(grads[a:b]) for a, b in layout.spans])
    return AttributionScores(scores, "gradnorm", {}, CostRecord(), {"model": backend.name})


class ReferenceEmbedder:
    """Mean input-token embedding of a text under a reference model."""

    def __init__(self, weights: M.ModelWeights):
        self.weights = weights
        self.name = f"mean-emb:{weights.name}"

    def __call__(self, text: str) -> np.ndarray:
        return M.mean_embedding(self.weights, list(text.encode("utf-8"))).astype(np.float64)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def embed_sim_attribution(embedder: Callable[[str], np.ndarray], layout: PromptLayout,
                          response: Sequence[int], sources: Sequence[str] | None = None
                          ) -> AttributionScores:
    """Cosine similarity between each source and the response.

    Source texts default to the layout's spans without their trailing
    separator.
    """
    if sources is None:
        sources = [detokenize(layout.source_tokens(i)[:-1], errors="replace")
                   for i in range(layout.n_sources)]
    r = np.asarray(embedder(detokenize(response, errors="replace")), dtype=np.float64)
    scores = np.array([cosine(np.asarray(embedder(s), dtype=np.float64), r) for s in sources])
    return AttributionScores(scores, "embedsim", {}, CostRecord(),
                             {"embedder": getattr(embedder, "name", type(embedder).__name__)})


# -- ContextCite -----------------------------------------------------------

@dataclass
class SurrogateFit:
    weights: np.ndarray
    intercept: float
    lam: float
    residual_norm: float
    sweeps: int = 0
    objective: np.ndarray | None = None


def default_lambda(X: np.ndarray, y: np.ndarray) -> float:
    """One percent of the smallest penalty that zeroes every weight."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 0.01 * float(np.max(np.abs(X.T @ (y - y.mean())))) / len(y)


def lasso_fit(X, y, lam: float, max_sweeps: int = 10_000, tol: float = 1e-8) -> SurrogateFit:
    """Lasso with an unpenalized intercept: ``(1/2n)||y - Xw - b||^2 + lam ||w||_1``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],) or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError("lasso_fit needs X of shape (n, d) and y of shape (n,)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))) or not math.isfinite(lam) or lam < 0:
        raise ValueError("lasso_fit needs finite inputs and lam >= 0")
    xm, ym = X.mean(0), y.mean()
    w, sweeps, hist = kernels.cd_lasso(X - xm, y - ym, float(lam), int(max_sweeps), float(tol))
    b = ym - xm @ w
    resid = y - X @ w - b
    return SurrogateFit(np.asarray(w), float(b), float(lam), float(np.linalg.norm(resid)), int(sweeps),
                        np.asarray(hist))


def logit_of_loglik(ll: float) -> float:
    """``logit(exp(ll))``, computed stably; ``ll`` is capped at -1e-9.

    No lower clamp: for very negative ``ll`` the result tends to ``ll``
    itself, and whole-response log-likelihoods routinely fall below -30.
    """
    ll = min(ll, -1e-9)
    return ll - math.log(-math.expm1(ll))


@dataclass(frozen=True)
class ContextCiteParams:
    n: int = 64
    p: float = 0.5
    lam: float | None = None  # None: default_lambda
    scale: str = "logit"
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two ablation masks")
        if not 0 < self.p < 1:
            raise ValueError("keep probability must lie in (0, 1)")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.scale not in ("logit", "log"):
            raise ValueError("scale must be 'logit' or 'log'")


class DegenerateDesign(AttributionError):
    pass


def sample_masks(n_sources: int, params: ContextCiteParams, attempts: int = 10) -> np.ndarray:
    """``n`` Bernoulli(p) keep-masks; resampled until they are not all identical."""
    rng = np.random.default_rng(params.seed)
    for _ in range(attempts):
        masks = rng.random((params.n, n_sources)) < params.p
        if (masks != masks[0]).any():
            return masks
    raise DegenerateDesign(f"all {params.n} ablation masks identical after {attempts} draws; increase n")


def contextcite(backend, layout: PromptLayout, response: Sequence[int],
                params: ContextCiteParams = ContextCiteParams()) -> AttributionScores:
    """Fit a sparse linear model from keep-masks to the (scaled) response likelihood."""
    _check(layout, response)
    masks = sample_masks(layout.n_sources, params)
    cost = StageCost("contextcite", backend.name, int(backend.param_count))
    t0 = time.perf_counter_ns()
    y = np.empty(params.n)
    for k, mask in enumerate(masks):
        removed = frozenset(np.flatnonzero(~mask).tolist())
        ll, toks = backend.score(Ablation(layout, removed), response)
        cost.add(toks)
        y[k] = logit_of_loglik(ll) if params.scale == "logit" else ll
    X = masks.astype(np.float64)
    lam = default_lambda(X, y) if params.lam is None else params.lam
    fit = lasso_fit(X, y, lam)
    cost.wall_ns = time.perf_counter_ns() - t0
    return AttributionScores(
        fit.weights.copy(), "contextcite",
        {"n": params.n, "p": params.p, "lam": lam, "scale": params.scale, "seed": params.seed},
        CostRecord([cost]), {"model": backend.name, "intercept": fit.intercept})
