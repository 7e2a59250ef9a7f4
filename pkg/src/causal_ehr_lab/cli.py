"""Command-line entry point (``cel``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CELError

log = logging.getLogger("causal_ehr_lab")


def _dump(obj, path) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _truth_path(cohort_path: Path) -> Path:
    name = cohort_path.name
    stem = name[: -len(".jsonl")] if name.endswith(".jsonl") else cohort_path.stem
    return cohort_path.with_name(stem + ".truth.json")


def cmd_synth(args) -> int:
    from .cohort import write_cohort
    from .synth import SynthConfig, generate, persistent_config, transient_config

    if args.config:
        cfg = SynthConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        make = persistent_config if args.kind == "persistent" else transient_config
        kw = {"n_patients": args.n, "seed": args.seed}
        if args.beta is not None:
            kw["beta"] = args.beta
        cfg = make(**kw)
    cohort, gt = generate(cfg)
    out = Path(args.out)
    write_cohort(cohort, out)
    _dump({"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "rr": gt.rr, "ey1": gt.ey1,
           "ey0": gt.ey0, "sampled_rr": gt.sampled_rr}, _truth_path(out))
    log.info("wrote %d patients to %s (ground-truth RR %.4f)", len(cohort), out, gt.rr)
    return 0


def cmd_fit(args) -> int:
    import numpy as np

    from .cohort import read_cohort
    from .estimators import write_predictions
    from .model.config import load_config
    from .model.io import save_params
    from .model.train import fit

    cohort = read_cohort(args.cohort)
    cfg = load_config(args.config, args.preset)
    withheld_codes = []
    for g in args.withhold_group or []:
        withheld_codes.extend(cohort.vocabulary.group_members(g))
    res = fit(cohort, cfg, args.mode, k=args.k, withheld_statics=args.withhold_static or (),
              withheld_codes=withheld_codes, keep_states=bool(args.params))
    write_predictions(res.predictions, args.out)
    if args.params:
        states = {f"fold{i}": s for i, s in enumerate(res.fold_states)}
        meta = {"mode": args.mode, "config": cfg.to_dict(), "vocab_size": len(cohort.vocabulary),
                "folds": np.asarray(res.folds).tolist()}
        save_params(args.params, states, meta)
    return 0


def cmd_estimate(args) -> int:
    from .estimators import ESTIMATORS, read_predictions

    preds = read_predictions(args.preds)
    report = ESTIMATORS[args.method](preds)
    out = report.to_dict()
    if args.truth:
        truth = json.loads(Path(args.truth).read_text())
        out["truth"] = truth["rr"]
        out["abs_error"] = abs(report.rr - truth["rr"])
        out["config_hash"] = truth.get("config_hash")
    _dump(out, args.out)
    return 0


def cmd_baseline(args) -> int:
    from .baselines import run_baseline
    from .cohort import read_cohort

    cohort = read_cohort(args.cohort)
    report, _, manifest = run_baseline(cohort, args.model, k=args.k, seed=args.seed, lam=args.lam,
                                       exclude_statics=args.withhold_static or (),
                                       exclude_groups=args.withhold_group or ())
    _dump(report.to_dict(), args.out)
    target = Path(args.out).parent if args.out not in (None, "-") else Path(".")
    _dump(manifest.to_dict(), target / "features.manifest.json")
    return 0


def _run_suite(args, subsample: bool) -> int:
    from .bench import DEFAULT_FRACTIONS, emit_report, load_experiment, run_confounding_suite, run_subsample_suite

    exp = load_experiment(args.config)
    if subsample:
        if args.fractions:
            exp.subsample_fractions = [float(f) for f in args.fractions.split(",")]
        elif not exp.subsample_fractions:
            exp.subsample_fractions = list(DEFAULT_FRACTIONS)
        exp.__post_init__()
        report = run_subsample_suite(exp, n_jobs=args.jobs)
    else:
        report = run_confounding_suite(exp, n_jobs=args.jobs)
    emit_report(report, args.out_dir)
    for m, s in report.sae.items():
        if s["sae"] is not None:
            se = "" if s["se"] is None else f" ± {s['se']:.4f}"
            print(f"{m:20s} SAE {s['sae']:.4f}{se}")
    bad = [c for c in report.cells if c.status != "ok"]
    for c in bad:
        print(f"FAILED {c.model} beta={c.beta} fraction={c.fraction}: {c.status} {c.error or ''}", file=sys.stderr)
    return 0 if not bad else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cel", description="Synthetic EHR confounding benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a semi-synthetic cohort")
    s.add_argument("--config", help="SynthConfig JSON")
    s.add_argument("--kind", choices=("persistent", "transient"), default="persistent")
    s.add_argument("--beta", type=float)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    from .model.config import MODES

    f = sub.add_parser("fit", help="five-fold causal network fit, out-of-fold predictions")
    f.add_argument("--cohort", required=True)
    f.add_argument("--mode", choices=MODES, default="t-behrt")
    f.add_argument("--config")
    f.add_argument("--preset", choices=("desk", "paper"), default="desk")
    f.add_argument("--k", type=int, default=5)
    f.add_argument("--withhold-static", action="append", metavar="NAME")
    f.add_argument("--withhold-group", action="append", metavar="GROUP")
    f.add_argument("--out", required=True)
    f.add_argument("--params")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("estimate", help="risk ratio from a predictions file")
    e.add_argument("--preds", required=True)
    e.add_argument("--method", choices=("naive", "tmle", "cv-tmle"), default="cv-tmle")
    e.add_argument("--truth")
    e.add_argument("--out", default="-")
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("baseline", help="logistic-regression baselines")
    b.add_argument("--cohort", required=True)
    b.add_argument("--model", choices=("lr", "lr-l1", "lr-l2", "lr-tmle"), default="lr-tmle")
    b.add_argument("--k", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--lam", type=float, default=1.0)
    b.add_argument("--withhold-static", action="append", metavar="NAME")
    b.add_argument("--withhold-group", action="append", metavar="GROUP")
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_baseline)

    for name, helptext in (("bench", "beta-sweep confounding suite"), ("subsample", "finite-sample suite")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--config", required=True)
        r.add_argument("--out-dir", required=True)
        r.add_argument("--jobs", type=int, default=1)
        if name == "subsample":
            r.add_argument("--fractions", help="comma-separated, e.g. 0.025,0.05,0.1,0.25,0.5,1.0")
        r.set_defaults(func=lambda a, sub_=name == "subsample": _run_suite(a, sub_))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CELError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
