"""Command-line entry point ``sure``.

Exit codes: 0 success, 1 validation failure (bad flags, missing or invalid
inputs, failed checks), 2 runtime error. Set SURE_LOG to error, info or debug.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cef import FilterConfig, FilterMode, filter_prior, outcome_record, pooled_image_embedding, prior_records
from .corpus import dumps_study, load_corpus
from .core import Study, ViewTag
from .emb import EmbeddingStore, write_embeddings
from .errors import ConfigError, CorpusRejected, FormatError, SureError
from .favr import GradOp, InitScheme, favr_fuse, grad_check, init_params, toy_grad_inputs
from .pipeline import PipelineConfig, run_pipeline, write_outputs
from .tsl import FreqTable, TierConfig, build_batch_plans, label_frequencies
from .views import Fallback, RepairPolicy, Resolved, audit_record, repair_view

log = logging.getLogger("suremed")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path: str, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo(cfg: dict) -> None:
    print(json.dumps({"effective_config": cfg}, sort_keys=True))


def _load(path: str) -> list[Study]:
    studies, errors = load_corpus(path)
    if errors:
        log.warning("%d corpus lines skipped", len(errors))
    return studies


# ----------------------------------------------------------------------------


def cmd_repair_views(args) -> int:
    d = _read_json(args.policy)
    if args.theta_assign is not None:
        d["theta_assign"] = args.theta_assign
    if args.theta_override is not None:
        d["theta_override"] = args.theta_override
    if args.fallback is not None:
        d["fallback"] = args.fallback
    policy = RepairPolicy.from_dict(d)
    _echo(policy.to_dict())
    studies = _load(args.corpus)
    with open(args.out, "w", encoding="utf-8") as fo, open(args.audit, "w", encoding="utf-8") as fa:
        for s in studies:
            images = []
            for im in s.images:
                rv = repair_view(im.view_tag, im.view_probs, policy)
                fa.write(json.dumps(audit_record(s.study_id, im, rv), sort_keys=True) + "\n")
                tag = "EXCLUDED" if rv.resolved is Resolved.EXCLUDED else rv.resolved.value
                images.append(type(im)(im.image_id, ViewTag.parse(tag), im.embedding_ref, im.view_probs, im.clip_ref))
            fo.write(dumps_study(Study(s.study_id, tuple(images), s.report, s.prior1, s.prior2)) + "\n")
    return EXIT_OK


def cmd_cef_filter(args) -> int:
    cfg = FilterConfig(
        mode=FilterMode(args.mode),
        tau=args.tau,
        tau_high_plus=args.tau_high,
        require_positive=not args.no_require_positive,
        strict_all_prior2=args.strict_all_prior2,
    )
    _echo(cfg.to_dict())
    studies = _load(args.corpus)
    store = EmbeddingStore(args.emb_dir)
    with open(args.out, "w", encoding="utf-8") as fo:
        for s in studies:
            recs = prior_records(s, store)
            v = pooled_image_embedding(s, store) if recs else None
            outcome = filter_prior(recs, v, cfg) if recs else filter_prior([], None, FilterConfig(FilterMode.NONE))
            fo.write(json.dumps(outcome_record(s.study_id, outcome, cfg), sort_keys=True) + "\n")
    return EXIT_OK


def cmd_tsl_weights(args) -> int:
    cfg = TierConfig.from_dict(_read_json(args.config))
    studies = _load(args.corpus)
    if args.freq:
        freq = FreqTable.from_dict(_read_json(args.freq))
    else:
        freq = label_frequencies(studies, level=args.level)
    if args.save_freq:
        _write_json(args.save_freq, freq.to_dict())
    _echo({**cfg.to_dict(), "m_scope": args.m_scope, "batch_size": args.batch_size, "freq": freq.to_dict()})
    plans = build_batch_plans([s.report for s in studies], freq, cfg, args.batch_size, args.m_scope)
    with open(args.out, "w", encoding="utf-8") as fo:
        for s, p in zip(studies, plans):
            fo.write(json.dumps({"study_id": s.study_id, **p.to_dict()}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_favr_fuse(args) -> int:
    from .pipeline import ResamplerConfig, make_resampler
    from .views import split_views

    studies = _load(args.corpus)
    store = EmbeddingStore(args.emb_dir)
    rc = ResamplerConfig(n_queries=args.n_queries, out_dim=args.out_dim, seed=args.seed, scheme=args.scheme, params=args.params)
    dim = store.rows(studies[0].images[0].embedding_ref).shape[1]
    params = make_resampler(rc, dim)
    _echo({**rc.to_dict(), "dim": dim})
    policy = RepairPolicy.from_dict(_read_json(args.policy))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats, row = [], 0
    with open(out / "fused.jsonl", "w", encoding="utf-8") as fo:
        for s in studies:
            rec = {"study_id": s.study_id}
            try:
                frontal, lateral, _ = split_views(s, policy)
                if not frontal:
                    raise SureError("MissingFrontal")
                hf = np.vstack([store.rows(im.embedding_ref) for im in frontal])
                hl = np.vstack([store.rows(im.embedding_ref) for im in lateral]) if lateral else None
                z = favr_fuse(hf, hl, params).z
                rec["features"] = {"file": "features.emb", "start": row, "end": row + z.shape[0]}
                feats.append(z)
                row += z.shape[0]
            except SureError as exc:
                rec["skipped"] = f"{type(exc).__name__}: {exc}"
            fo.write(json.dumps(rec, sort_keys=True) + "\n")
    if feats:
        write_embeddings(out / "features.emb", np.vstack(feats))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.workers is not None or args.out_dir is not None:
        d = cfg.to_dict()
        d["workers"] = args.workers if args.workers is not None else cfg.workers
        d["out_dir"] = args.out_dir if args.out_dir is not None else cfg.out_dir
        cfg = PipelineConfig.from_dict(d)
    result = run_pipeline(cfg)
    out = write_outputs(result)
    print(json.dumps(result.summary, sort_keys=True))
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    reports = []
    for seed in range(args.seed, args.seed + args.seeds):
        params, inputs = toy_grad_inputs(seed, args.n_queries, args.dim, args.out_dim)
        for op in GradOp:
            r = grad_check(op, params, inputs, eps=args.eps, tol=args.tol)
            ok &= r.passed
            reports.append({"seed": seed, "op": op.value, "max_rel_error": r.max_rel_error, "passed": r.passed})
            print(f"seed={seed} op={op.value} max_rel_error={r.max_rel_error:.3e} {'PASS' if r.passed else 'FAIL'}")
    if args.out:
        _write_json(args.out, reports)
    return EXIT_OK if ok else EXIT_INVALID


def _lab_config(args):
    from .lab.experiments import LabConfig

    cfg = LabConfig.from_dict(_read_json(args.config))
    if args.seeds:
        cfg.seeds = tuple(args.seeds)
    return cfg


def cmd_lab_imbalance(args) -> int:
    from .lab.experiments import imbalance_experiment

    cfg = _lab_config(args)
    _echo(cfg.to_dict())
    report = imbalance_experiment(cfg)
    _write_json(args.out, report)
    print(
        f"TSL beats CE on the {cfg.n_tail} rarest findings in {report['rare_wins']}/{report['n_seeds']} seeds; "
        f"mean common-finding F1 change {-report['mean_common_degradation']:+.3f}"
    )
    return EXIT_OK


def cmd_lab_filter_ablation(args) -> int:
    from .lab.experiments import filter_ablation
    from .lab.synth import generate_corpus

    cfg = _lab_config(args)
    _echo(cfg.to_dict())
    rows = filter_ablation(generate_corpus(cfg.synth), cfg.taus, tau_high_plus=cfg.tau_high_plus)
    _write_json(args.out, [r.to_dict() for r in rows])
    for r in rows:
        print(f"{r.mode:8s} tau={r.tau:.2f} stale_rate={r.stale_rate:.3f} relevant_rate={r.relevant_rate:.3f}")
    return EXIT_OK


def cmd_lab_make_corpus(args) -> int:
    from .lab.synth import generate_corpus, write_synth

    cfg = _lab_config(args)
    write_synth(generate_corpus(cfg.synth), args.out_dir)
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sure", description="View repair, resampling, loss weighting and prior filtering for report generation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("repair-views", help="repair view tags and write an audit trail")
    s.add_argument("--corpus", required=True)
    s.add_argument("--policy", help="JSON with theta_assign, theta_override, fallback")
    s.add_argument("--theta-assign", type=float)
    s.add_argument("--theta-override", type=float)
    s.add_argument("--fallback", choices=[f.value for f in Fallback])
    s.add_argument("--out", required=True, help="corpus with repaired tags")
    s.add_argument("--audit", required=True, help="one JSON line per image decision")
    s.set_defaults(func=cmd_repair_views)

    s = sub.add_parser("cef-filter", help="filter prior-report sentences by image similarity")
    s.add_argument("--corpus", required=True)
    s.add_argument("--emb-dir", required=True)
    s.add_argument("--mode", choices=[m.value for m in FilterMode], default=FilterMode.DYNAMIC.value)
    s.add_argument("--tau", type=float, default=0.22)
    s.add_argument("--tau-high", type=float, default=0.30)
    s.add_argument("--no-require-positive", action="store_true")
    s.add_argument("--strict-all-prior2", action="store_true", help="strict threshold for every prior2 sentence")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cef_filter)

    s = sub.add_parser("tsl-weights", help="per-sentence and per-token loss weights")
    s.add_argument("--corpus", required=True)
    s.add_argument("--freq", help="frequency table JSON; computed from the corpus if omitted")
    s.add_argument("--save-freq", help="write the frequency table used")
    s.add_argument("--level", choices=["report", "sentence"], default="report")
    s.add_argument("--config", help="JSON with t1, t2, alpha, gamma")
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--m-scope", choices=["batch", "corpus"], default="batch")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tsl_weights)

    s = sub.add_parser("favr-fuse", help="fuse frontal and lateral image tokens")
    s.add_argument("--corpus", required=True)
    s.add_argument("--emb-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--policy")
    s.add_argument("--params", help=".npz resampler parameters")
    s.add_argument("--n-queries", type=int, default=128)
    s.add_argument("--out-dim", type=int, default=64)
    s.add_argument("--scheme", choices=[x.value for x in InitScheme], default=InitScheme.SCALED_GAUSSIAN.value)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_favr_fuse)

    s = sub.add_parser("run", help="full pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("gradcheck", help="finite-difference check of the resampler gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--n-queries", type=int, default=2)
    s.add_argument("--dim", type=int, default=3)
    s.add_argument("--out-dim", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    lab = sub.add_parser("lab", help="desk-scale experiments on synthetic data")
    labsub = lab.add_subparsers(dest="lab_command", required=True, parser_class=_Parser)
    for name, func, help_ in (
        ("imbalance", cmd_lab_imbalance, "CE vs. token-sensitive loss on rare findings"),
        ("filter-ablation", cmd_lab_filter_ablation, "stale/relevant retention per filter mode"),
    ):
        s = labsub.add_parser(name, help=help_)
        s.add_argument("--config")
        s.add_argument("--seeds", type=int, nargs="+")
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)
    s = labsub.add_parser("make-corpus", help="write a synthetic corpus with EMB1 files")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_lab_make_corpus)
    return p


def _setup_logging() -> None:
    level = os.environ.get("SURE_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorpusRejected, FormatError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"sure: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SureError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"sure: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
