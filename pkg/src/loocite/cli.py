"""Command line: ``gen-model``, ``attribute``, ``evaluate``, ``flops``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from . import model as M
from .evaluation import FLOPS_METHODS, EsdConfig, FlopsParams, theoretical_flops
from .runner import METHODS, AttributeConfig, RunError, format_report, run_attribute, run_evaluate


def _gen_model(a) -> int:
    cfg = M.ModelConfig(a.layers, a.heads, a.dmodel, a.dff, a.vocab, a.max_seq)
    w = M.init_reference_model(cfg, a.seed, zero=a.zero)
    M.save_model(w, a.out)
    print(f"wrote {a.out}: {w.param_count} parameters")
    return 0


def _attribute(a) -> int:
    cfg = AttributeConfig(
        model=a.model, method=a.method, dataset=a.dataset, out=a.out, proxy_model=a.proxy_model,
        alpha=a.alpha, beta=a.beta, min_keep=a.min_keep, pipeline=a.pipeline, seed=a.seed,
        max_new=a.max_new, template=a.template, keep_going=a.keep_going, kv=not a.no_kv,
        contextcite_n=a.contextcite_n, workers=a.workers)
    failures = run_attribute(cfg)
    if failures and not a.keep_going:
        return 1
    return 0


def _evaluate(a) -> int:
    report = run_evaluate(a.truth, a.pred, a.out, EsdConfig(a.esd_alpha, a.esd_max))
    print(format_report(report))
    return 0


def _flops(a) -> int:
    p = FlopsParams(P=a.P, T=a.T, C=a.C, P_proxy=a.Pprime, H=a.H, alpha=a.alpha, beta=a.beta)
    out = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
           for k, v in theoretical_flops(a.method, p).items()}
    print(json.dumps({"method": a.method, **out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loocite", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a reference model file")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--dmodel", type=int, default=32)
    g.add_argument("--dff", type=int, default=64)
    g.add_argument("--vocab", type=int, default=258)
    g.add_argument("--max-seq", type=int, default=1024)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--zero", action="store_true", help="all-zero weights")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_model)

    t = sub.add_parser("attribute", help="score every source of every example")
    t.add_argument("--model", required=True)
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--proxy-model")
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--beta", type=float, default=0.5)
    t.add_argument("--min-keep", type=int, default=3)
    t.add_argument("--pipeline", help="JSON file, inline JSON, or comma-separated stages")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-new", type=int, default=32)
    t.add_argument("--template", help="prompt template file with {context} and {question}")
    t.add_argument("--keep-going", action="store_true")
    t.add_argument("--no-kv", action="store_true", help="disable KV reuse in hier/proxy/prune")
    t.add_argument("--contextcite-n", type=int, default=64)
    t.add_argument("--workers", type=int)
    t.set_defaults(func=_attribute)

    e = sub.add_parser("evaluate", help="mAP of candidate scores against ESD outliers of exact LOO")
    e.add_argument("--truth", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--out")
    e.add_argument("--esd-alpha", type=float, default=0.05)
    e.add_argument("--esd-max", type=int, default=50)
    e.set_defaults(func=_evaluate)

    f = sub.add_parser("flops", help="closed-form FLOPs and speedup")
    f.add_argument("--method", required=True, choices=FLOPS_METHODS)
    f.add_argument("--P", type=float, required=True)
    f.add_argument("--Pprime", type=float)
    f.add_argument("--T", type=float, required=True)
    f.add_argument("--C", type=float, required=True)
    f.add_argument("--H", type=float)
    f.add_argument("--alpha", type=float)
    f.add_argument("--beta", type=float)
    f.set_defaults(func=_flops)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RunError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
