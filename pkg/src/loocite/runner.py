"""Batch attribution and evaluation over datasets."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from . import model as M
from .accel import HierParams, PipelineSpec, PruneParams, hierarchical, proxy_attribute, proxy_prune, run_pipeline
from .backends import ReferenceBackend
from .baselines import (ContextCiteParams, ReferenceEmbedder, attention_attribution, contextcite,
                        embed_sim_attribution, gradnorm_attribution)
from .context import DEFAULT_TEMPLATE, Example, build_prompt, detokenize, tokenize
from .core import AttributionScores, BaseCache, loo_exact, loo_kv
from .evaluation import (EsdConfig, FlopsParams, average_precision, counted_flops, esd_outliers, mean_ap,
                         theoretical_flops)
from .records import RunResult, load_dataset, read_results, write_results

log = logging.getLogger(__name__)

METHODS = ("loo", "kv", "hier", "proxy", "prune", "pipeline", "attention", "gradnorm", "embedsim",
           "contextcite")
PROXY_METHODS = ("proxy", "prune")
WORKERS_ENV = "LOOCITE_WORKERS"


class RunError(RuntimeError):
    pass


@dataclass
class AttributeConfig:
    model: str
    method: str
    dataset: str
    out: str
    proxy_model: str | None = None
    alpha: float = 0.5
    beta: float = 0.5
    min_keep: int = 3
    pipeline: str | None = None
    seed: int = 0
    max_new: int = 32
    template: str | None = None
    keep_going: bool = False
    kv: bool = True
    contextcite_n: int = 64
    workers: int | None = None
    esd_alpha: float = 0.05
    esd_max: int = 50

    def validate(self) -> None:
        if self.method not in METHODS:
            raise RunError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.method in PROXY_METHODS and not self.proxy_model:
            raise RunError(f"method {self.method!r} needs --proxy-model")
        if self.method == "pipeline":
            if not self.pipeline:
                raise RunError("method 'pipeline' needs --pipeline")
            spec = _load_pipeline(self.pipeline)
            if PipelineSpec.from_dict(_with_defaults(spec, self)).uses_proxy and not self.proxy_model:
                raise RunError("pipeline uses a proxy model; pass --proxy-model")


def _load_pipeline(text_or_path: str) -> dict:
    p = Path(text_or_path)
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8"))
    if text_or_path.lstrip().startswith("{"):
        return json.loads(text_or_path)
    return {"stages": text_or_path}


def _with_defaults(spec: dict, cfg: AttributeConfig) -> dict:
    d = dict(spec)
    d.setdefault("alpha", cfg.alpha)
    d.setdefault("beta", cfg.beta)
    d.setdefault("min_keep", cfg.min_keep)
    return d


def worker_count(requested: int | None = None) -> int:
    if requested:
        return max(1, requested)
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


_MODELS: dict[str, M.ModelWeights] = {}


def _model(path: str) -> M.ModelWeights:
    if path not in _MODELS:
        _MODELS[path] = M.load_model(path)
    return _MODELS[path]


def attribute_example(ex: Example, cfg: AttributeConfig) -> RunResult:
    """Score one example; pure function of (example, config, model files)."""
    target = ReferenceBackend(_model(cfg.model))
    proxy = ReferenceBackend(_model(cfg.proxy_model)) if cfg.proxy_model else None
    template = Path(cfg.template).read_text(encoding="utf-8") if cfg.template else DEFAULT_TEMPLATE
    layout = build_prompt(template, ex.partition, ex.query)
    if ex.response is not None:
        response = tokenize(ex.response)
        generated = False
    else:
        response = target.generate(layout.tokens, cfg.max_new)
        generated = True
    if not response:
        raise RunError(f"example {ex.id!r}: empty response")
    bases = BaseCache()
    m = cfg.method
    if m == "loo":
        res = loo_exact(target, layout, response, bases)
    elif m == "kv":
        res = loo_kv(target, layout, response, bases)
    elif m == "hier":
        res = hierarchical(target, layout, response, HierParams(cfg.beta, cfg.min_keep), kv=cfg.kv, bases=bases)
    elif m == "proxy":
        res = proxy_attribute(proxy, layout, response, target=target, kv=cfg.kv, bases=bases)
    elif m == "prune":
        res = proxy_prune(target, proxy, layout, response, PruneParams(cfg.alpha, cfg.min_keep), kv=cfg.kv,
                          bases=bases)
    elif m == "pipeline":
        raw = _load_pipeline(cfg.pipeline)
        spec = PipelineSpec.from_dict(_with_defaults(raw, cfg))
        res = run_pipeline(spec, target, proxy if spec.uses_proxy else None, layout, response, bases)
        res.params = {**spec.to_dict(), "spec": raw}
    elif m == "attention":
        res = attention_attribution(target, layout, response)
    elif m == "gradnorm":
        res = gradnorm_attribution(target, layout, response)
    elif m == "embedsim":
        res = embed_sim_attribution(ReferenceEmbedder(target.weights), layout, response,
                                    sources=list(ex.partition.sources))
    elif m == "contextcite":
        res = contextcite(target, layout, response, ContextCiteParams(n=cfg.contextcite_n, seed=cfg.seed))
    else:
        raise RunError(f"unknown method {m!r}")
    return _to_result(ex, cfg, res, layout, response, generated, target, proxy)


def _theoretical(method: str, params: dict, layout, target, proxy) -> float | None:
    C = layout.n_sources
    T = float(np.mean(layout.span_lengths()))
    H = C / len(layout.grouping)
    P = float(target.param_count)
    Pp = float(proxy.param_count) if proxy is not None else None
    if method == "pipeline":
        stages = set(params.get("stages", ()))
        method = {frozenset({"kv"}): "kv", frozenset({"proxy"}): "proxy", frozenset({"prune"}): "prune",
                  frozenset({"proxy", "prune"}): "prune",
                  frozenset({"hierarchical"}): "hier"}.get(frozenset(stages))
    if method not in ("loo", "kv", "proxy", "prune", "hier") or C < 2:
        return None
    fp = FlopsParams(P=P, T=T, C=C, P_proxy=Pp, H=H, alpha=params.get("alpha"), beta=params.get("beta"))
    if method == "hier":
        # the closed form counts kept sources as beta * |C|
        fp = replace(fp, beta=len(params.get("retained", [])) / C or fp.beta)
    return float(theoretical_flops(method, fp)["flops"])


def _to_result(ex, cfg, res: AttributionScores, layout, response, generated, target, proxy) -> RunResult:
    scores = [float(s) for s in res.scores]
    outliers = None
    if cfg.method in ("loo", "kv"):
        outliers = esd_outliers(scores, EsdConfig(cfg.esd_alpha, cfg.esd_max)).outliers
    params = dict(res.params)
    theo_params = {**params, "retained": res.meta.get("retained", [])}
    models = {"target": target.name, "target_params": target.param_count}
    if proxy is not None and "proxy" in res.meta:
        models.update(proxy=proxy.name, proxy_params=proxy.param_count)
    meta = {k: v for k, v in res.meta.items() if k not in ("model", "proxy")}
    meta.update(decoding="greedy" if generated else "given", n_sources=layout.n_sources,
                evaluations=res.cost.evaluations)
    return RunResult(
        id=ex.id, method=cfg.method, params=params, scores=scores,
        cost=res.cost.to_dict(include_time=False), counted_flops=counted_flops(res.cost),
        theoretical_flops=_theoretical(cfg.method, theo_params, layout, target, proxy),
        outliers=outliers, response=detokenize(response, errors="replace"), response_tokens=list(response),
        seed=cfg.seed, models=models, meta=_jsonable(meta))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _attribute_task(args):
    ex, cfg = args
    t0 = time.perf_counter_ns()
    try:
        return attribute_example(ex, cfg), None, time.perf_counter_ns() - t0
    except Exception as e:  # reported per example
        return None, f"{type(e).__name__}: {e}", time.perf_counter_ns() - t0


def run_attribute(cfg: AttributeConfig) -> int:
    """Attribute every example and write the result stream; returns the failure count.

    Timing and host details go to ``<out>.meta.json`` so the stream itself
    is byte-identical across identical runs.
    """
    cfg.validate()
    examples = load_dataset(cfg.dataset)
    workers = min(worker_count(cfg.workers), max(1, len(examples)))
    tasks = [(ex, cfg) for ex in examples]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_attribute_task, tasks))
    else:
        outcomes = map(_attribute_task, tasks)
    results, failures, timing = [], [], {}
    for ex, (res, err, ns) in zip(examples, outcomes):
        timing[ex.id] = ns
        if err is not None:
            failures.append({"id": ex.id, "error": err})
            log.error("example %s failed: %s", ex.id, err)
            if not cfg.keep_going:
                break
            continue
        results.append(res)
    write_results(cfg.out, results)
    sidecar = {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "wall_ns": timing, "failures": failures,
               "workers": workers, "kernels": kernels.BACKEND, "config": vars(cfg)}
    Path(str(cfg.out) + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return len(failures)


# -- evaluation ------------------------------------------------------------

def evaluate_results(truth: Sequence[RunResult], pred: Sequence[RunResult],
                     esd: EsdConfig = EsdConfig()) -> dict:
    """AP of each candidate ranking against ESD outliers of the truth scores."""
    tmap = {r.id: r for r in truth}
    common = [p for p in pred if p.id in tmap]
    unknown = [p.id for p in pred if p.id not in tmap]
    if not common:
        raise RunError("truth and candidate results share no example ids")
    if unknown:
        raise RunError(f"candidate ids missing from truth: {unknown}")
    rows, cases, speedups = [], [], []
    for p in common:
        t = tmap[p.id]
        if not t.scores:
            raise RunError(f"truth for {p.id!r} has no scores")
        if len(t.scores) != len(p.scores):
            raise RunError(f"score count mismatch for {p.id!r}")
        outl = esd_outliers(t.scores, esd).outliers
        ap = average_precision(p.scores, outl) if outl else None
        sp = t.counted_flops / p.counted_flops if p.counted_flops else None
        if sp is not None:
            speedups.append(sp)
        cases.append((p.scores, outl))
        rows.append({"id": p.id, "n_sources": len(p.scores), "n_out": len(outl), "ap": ap, "speedup": sp})
    used = [c for c in cases if c[1]]
    return {
        "method": common[0].method,
        "mAP": mean_ap(used) if used else None,
        "examples": len(rows),
        "skipped_no_outliers": len(rows) - len(used),
        "mean_speedup": float(np.mean(speedups)) if speedups else None,
        "esd": {"alpha": esd.alpha, "max_outliers": esd.max_outliers},
        "per_example": rows,
    }


def format_report(report: dict) -> str:
    lines = [f"{'id':<20} {'|C|':>5} {'n_out':>6} {'AP':>8} {'speedup':>9}"]
    for r in report["per_example"]:
        ap = "-" if r["ap"] is None else f"{r['ap']:.4f}"
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.2f}"
        lines.append(f"{r['id']:<20} {r['n_sources']:>5} {r['n_out']:>6} {ap:>8} {sp:>9}")
    m = report["mAP"]
    s = report["mean_speedup"]
    lines.append(f"mAP = {'-' if m is None else f'{m:.4f}'} over {report['examples'] - report['skipped_no_outliers']}"
                 f" examples ({report['skipped_no_outliers']} without outliers skipped);"
                 f" mean speedup = {'-' if s is None else f'{s:.2f}'}")
    return "\n".join(lines)


def run_evaluate(truth_path: str, pred_path: str, out: str | None = None,
                 esd: EsdConfig = EsdConfig()) -> dict:
    report = evaluate_results(read_results(truth_path), read_results(pred_path), esd)
    if out:
        Path(out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
