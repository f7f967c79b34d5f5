"""Command-line interface: ``hipposurv <command> [options]``.

Every command writes into the directory given by ``--out``. On failure the
process exits nonzero after printing one JSON line ``{"error": ..., "message": ...}``
to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import metrics, network, survival
from .augment import TrainingSet
from .errors import HipposurvError, PreconditionError
from .pipeline import (
    assemble_covariates, fmt, load_records, read_config, read_manifest, read_table,
    survival_arrays, write_csv, write_manifest,
)
from .records import CLINICAL_COLUMNS
from .synthcohort import GenConfig, generate_cohort, oracle_c_index
from .volume import Volume, normalize_intensity, write_volume

log = logging.getLogger("hipposurv")

DEFAULT_CLINICAL = "age,sex,education,apoe4"


class UsageError(HipposurvError):
    pass


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _horizons(text):
    if not text:
        return []
    try:
        return [float(h) for h in str(text).split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"--horizon expects comma-separated months, got {text!r}") from None


def _require(args, *names):
    for n in names:
        if not getattr(args, n, None):
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args):
    out = _out_dir(args)
    cfg = GenConfig(
        seed=args.seed, dims=tuple(int(d) for d in args.dims.split(",")), noise_std=args.noise_std,
        atrophy=args.atrophy, lambda0=args.lambda0, theta=args.theta,
    )
    records = generate_cohort(cfg, args.n_adnc, args.n_mci)
    adnc = [r for r in records if r.label != "MCI"]
    mci = [r for r in records if r.label == "MCI"]
    n_eval = int(round(len(adnc) * args.eval_fraction))
    n_test = int(round(len(mci) * args.test_fraction))
    splits = {
        "adnc_train": adnc[: len(adnc) - n_eval],
        "adnc_eval": adnc[len(adnc) - n_eval :],
        "mci_train": mci[: len(mci) - n_test],
        "mci_test": mci[len(mci) - n_test :],
    }
    truth = []
    for name, recs in splits.items():
        write_manifest(recs, out / f"{name}.csv")
        truth += [(r.subject_id, name, r.label, r.severity, r.time, r.event) for r in recs]
    write_csv(out / "truth.csv", ("subject_id", "split", "label", "severity", "time_months", "event"), truth)
    rows = [(name, len(recs)) for name, recs in splits.items()]
    if len(splits["mci_test"]) > 1:
        try:
            rows.append(("oracle_c_index_mci_test", oracle_c_index(splits["mci_test"])))
        except PreconditionError:
            pass
    write_csv(out / "summary.csv", ("key", "value"), rows)
    for k, v in rows:
        print(f"{k} {fmt(v)}")


def cmd_train_cnn(args):
    _require(args, "manifest")
    out = _out_dir(args)
    rows = read_manifest(args.manifest)
    if any(r.label == "MCI" for r in rows):
        raise UsageError("train-cnn takes NC/AD rows only; the manifest contains MCI rows")
    train_recs = load_records(rows)
    eval_recs = None
    if args.eval_manifest:
        erows = [r for r in read_manifest(args.eval_manifest) if r.label != "MCI"]
        eval_recs = load_records(erows)
    dims = train_recs[0].left.dims
    cfg = network.NetConfig(input_dims=dims, scale_factor=Fraction(args.scale))
    params = network.build_network(cfg, np.random.default_rng([args.seed, 0]))
    schedule = network.TrainSchedule(max_iters=args.iters, batch_size=args.batch_size, seed=args.seed)
    dataset = TrainingSet(train_recs, augment=not args.no_augment)

    def progress(row):
        if (row["step"] + 1) % 200 == 0:
            log.info("step %d lr %.3g loss %.4f", row["step"] + 1, row["lr"], row["loss"])

    checkpoints, train_log = network.train(params, dataset, schedule, eval_recs, args.eval_every, progress)
    if eval_recs and any(np.isfinite(c.auc) for c in checkpoints):
        best = network.select_checkpoint(checkpoints)
        step = next(c.step for c in checkpoints if c.params is best)
    else:
        best, step = checkpoints[-1].params, checkpoints[-1].step
    network.save_model(best, out / "model.hpnet")
    write_csv(out / "train_log.csv", ("step", "lr", "loss", "eval_auc"),
              [(r["step"], r["lr"], r["loss"], r["eval_auc"]) for r in train_log])
    write_csv(out / "checkpoints.csv", ("step", "eval_auc", "selected"),
              [(c.step, c.auc, int(c.step == step)) for c in checkpoints])
    print(f"selected_step {step}")
    print(f"feature_dim {cfg.feature_dim}")


def cmd_extract_features(args):
    _require(args, "manifest", "model")
    out = _out_dir(args)
    params = network.load_model(args.model)
    rows = sorted(read_manifest(args.manifest), key=lambda r: r.subject_id)
    recs = load_records(rows)
    feats = []
    for i in range(0, len(recs), 16):
        chunk = recs[i : i + 16]
        left = np.stack([normalize_intensity(r.left).data for r in chunk])
        right = np.stack([normalize_intensity(r.right).data for r in chunk])
        feats.append(network.extract_features_batch(params, left, right))
    F = np.concatenate(feats) if feats else np.zeros((0, params.config.feature_dim))
    header = ["subject_id"] + [f"f{k:03d}" for k in range(F.shape[1])]
    write_csv(out / "features.csv", header, [[r.subject_id, *F[i]] for i, r in enumerate(rows)])
    print(f"subjects {len(rows)}")
    print(f"feature_dim {F.shape[1]}")


def cmd_fit_cox(args):
    _require(args, "manifest")
    out = _out_dir(args)
    rows = read_manifest(args.manifest)
    rows = [r for r in rows if r.label == "MCI" or not args.mci_only]
    time, event = survival_arrays(rows)
    sources = {}
    if args.features:
        sources["features"] = read_table(args.features)
    if args.predictions:
        cols, table = read_table(args.predictions)
        sources["predictions"] = (["imaging_eta" if c == "eta" else c for c in cols], table)
    if args.clinical and args.combined:
        raise UsageError("--clinical and --combined are mutually exclusive")
    if args.clinical or args.combined:
        names = [c.strip() for c in args.covariates.split(",") if c.strip()]
        unknown = [c for c in names if c not in CLINICAL_COLUMNS]
        if unknown:
            raise UsageError(f"unknown clinical covariates {unknown}")
        if args.combined:
            if "predictions" not in sources:
                raise UsageError("--combined needs --predictions with an imaging eta column")
            names = names + ["imaging_eta"]
        X = assemble_covariates(names, rows, sources)
        fit = survival.fit_cox(survival.SurvivalData(X, time, event, names))
        survival.save_coxfit(fit, out / "coxfit.txt")
        write_csv(out / "cox_summary.csv", ("covariate", "coef", "hazard_ratio", "se", "z", "p"), fit.summary())
        print(f"loglik {fmt(fit.loglik)}")
        return
    if "features" not in sources:
        raise UsageError("fit-cox needs --features (or --clinical / --combined)")
    names = sources["features"][0]
    X = assemble_covariates(names, rows, sources)
    data = survival.SurvivalData(X, time, event, names)
    fit, cv = survival.fit_lasso_cox(data, folds=args.folds, seed=args.seed)
    survival.save_coxfit(fit, out / "coxfit.txt")
    write_csv(out / "cv_curve.csv", ("lambda", "mean_deviance", "se_deviance", "nonzero"), cv.curve_rows())
    print(f"lambda {fmt(fit.lam)}")
    print(f"nonzero {int(np.count_nonzero(fit.beta))}")


def cmd_predict(args):
    _require(args, "manifest", "coxfit")
    out = _out_dir(args)
    fit = survival.load_coxfit(args.coxfit)
    rows = sorted(read_manifest(args.manifest), key=lambda r: r.subject_id)
    sources = {}
    if args.features:
        sources["features"] = read_table(args.features)
    if args.predictions:
        cols, table = read_table(args.predictions)
        sources["predictions"] = (["imaging_eta" if c == "eta" else c for c in cols], table)
    X = assemble_covariates(fit.names, rows, sources)
    eta = survival.predict_risk(fit, X)
    horizons = _horizons(args.horizon)
    probs = [1.0 - survival.predict_survival(fit, X, h) for h in horizons]
    header = ["subject_id", "eta"] + [f"prob_{fmt(h)}" for h in horizons]
    write_csv(out / "predictions.csv", header,
              [[r.subject_id, eta[i], *[p[i] for p in probs]] for i, r in enumerate(rows)])
    print(f"subjects {len(rows)}")


def _risks_for(args):
    rows = read_manifest(args.manifest)
    cols, table = read_table(args.predictions)
    if "eta" not in cols:
        raise UsageError(f"{args.predictions} has no eta column")
    rows = [r for r in rows if r.subject_id in table]
    if not rows:
        raise UsageError("no manifest subject appears in the predictions file")
    rows.sort(key=lambda r: r.subject_id)
    time, event = survival_arrays(rows)
    risk = np.array([table[r.subject_id][cols.index("eta")] for r in rows])
    return rows, risk, time, event


def cmd_evaluate(args):
    _require(args, "manifest", "predictions")
    out = _out_dir(args)
    rows, risk, time, event = _risks_for(args)
    c = metrics.concordance_index(risk, time, event, args.tie_rule)
    ci = metrics.bootstrap_ci(lambda r, t, e: metrics.concordance_index(r, t, e, args.tie_rule).c_index,
                              (risk, time, event), n_resamples=args.n_boot, seed=args.seed)
    table = [("c_index", c.c_index, ci.low, ci.high, c.pairs)]
    print(f"c_index {c.c_index:.6f}")
    print(f"c_index_ci {fmt(ci.low)} {fmt(ci.high)}")
    for h in _horizons(args.horizon):
        pts, td = metrics.td_roc_ipcw(risk, time, event, h)

        def stat(r, t, e, h=h):
            return metrics.td_roc_ipcw(r, t, e, h)[1].auc

        hci = metrics.bootstrap_ci(stat, (risk, time, event), n_resamples=args.n_boot, seed=args.seed)
        table.append((f"td_auc_{fmt(h)}", td.auc, hci.low, hci.high, td.n_cases))
        write_csv(out / f"roc_{fmt(h)}.csv", ("threshold", "sensitivity", "specificity"),
                  [(p.threshold, p.sensitivity, p.specificity) for p in pts])
        print(f"td_auc_{fmt(h)} {td.auc:.6f}")
    write_csv(out / "evaluation.csv", ("metric", "value", "ci_low", "ci_high", "n"), table)


def cmd_stratify(args):
    _require(args, "manifest", "predictions")
    out = _out_dir(args)
    rows, risk, time, event = _risks_for(args)
    groups = metrics.stratify_by_risk(risk)
    write_csv(out / "groups.csv", ("subject_id", "eta", "group"),
              [(r.subject_id, risk[i], groups[i]) for i, r in enumerate(rows)])
    km_rows = []
    for g in metrics.GROUPS:
        m = groups == g
        if not m.any():
            continue
        curve = metrics.kaplan_meier(time[m], event[m])
        km_rows.append((g, 0.0, 1.0, int(m.sum()), 0))
        km_rows += [(g, t, s, n, d) for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events)]
    write_csv(out / "km.csv", ("group", "time", "survival", "at_risk", "events"), km_rows)
    tests = []
    present = sorted(set(groups.tolist()), key=metrics.GROUPS.index)
    if len(present) >= 2:
        lr = metrics.logrank_test(groups, time, event)
        tests.append(("all_groups", lr.statistic, lr.df, lr.p_value))
    lh = np.isin(groups, ["Low", "High"])
    if len(set(groups[lh].tolist())) == 2:
        lr = metrics.logrank_test(groups[lh], time[lh], event[lh])
        tests.append(("low_vs_high", lr.statistic, lr.df, lr.p_value))
    if len(present) < 2:
        log.warning("all subjects fall in one risk group; no group comparison is possible")
    elif args.adjust:
        names = [c.strip() for c in args.adjust.split(",") if c.strip()]
        cov = assemble_covariates(names, rows, {})
        adj = metrics.adjusted_group_test(groups, time, event, cov)
        tests.append(("adjusted_lrt", adj.statistic, adj.df, adj.p_value))
    write_csv(out / "logrank.csv", ("test", "statistic", "df", "p_value"), tests)
    for g in metrics.GROUPS:
        print(f"n_{g} {int(np.sum(groups == g))}")
    for name, stat, df, p in tests:
        print(f"{name} chi2={fmt(stat)} df={df} p={fmt(p)}")


def cmd_relevance_map(args):
    _require(args, "manifest", "model")
    out = _out_dir(args)
    params = network.load_model(args.model)
    rows = sorted(read_manifest(args.manifest), key=lambda r: r.subject_id)
    if args.subjects:
        wanted = set(args.subjects.split(","))
        rows = [r for r in rows if r.subject_id in wanted]
    sums, counts = {}, {}
    for rec in load_records(rows):
        maps = network.relevance_map(params, normalize_intensity(rec.left), normalize_intensity(rec.right))
        group = rec.label if rec.label != "MCI" else ("pMCI" if rec.event == 1 else "sMCI")
        for side, m in zip(("left", "right"), maps):
            if args.per_subject:
                write_volume(m, out / f"{rec.subject_id}_{side}.vol3")
            key = (group, side)
            sums[key] = sums.get(key, 0) + m.data.astype(np.float64)
        counts[group] = counts.get(group, 0) + 1
    summary = []
    for (group, side), total in sorted(sums.items()):
        mean = total / counts[group]
        write_volume(Volume(mean.astype(np.float32)), out / f"mean_{group}_{side}.vol3")
        summary.append((group, side, counts[group], float(mean.mean()), float(mean.max())))
    write_csv(out / "relevance_summary.csv", ("group", "side", "n", "mean", "max"), summary)
    print(f"subjects {len(rows)}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cnn": cmd_train_cnn,
    "extract-features": cmd_extract_features,
    "fit-cox": cmd_fit_cox,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "stratify": cmd_stratify,
    "relevance-map": cmd_relevance_map,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="hipposurv", description="Hippocampal MRI deep features + LASSO-Cox prognosis.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value file supplying defaults for any option")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic cohort"))
    g.add_argument("--n-adnc", type=int, default=400)
    g.add_argument("--n-mci", type=int, default=300)
    g.add_argument("--eval-fraction", type=float, default=0.2, help="share of NC/AD held out for checkpoint selection")
    g.add_argument("--test-fraction", type=float, default=0.5, help="share of MCI held out for evaluation")
    g.add_argument("--dims", default="29,21,55")
    g.add_argument("--noise-std", type=float, default=GenConfig.noise_std)
    g.add_argument("--atrophy", type=float, default=GenConfig.atrophy)
    g.add_argument("--lambda0", type=float, default=GenConfig.lambda0)
    g.add_argument("--theta", type=float, default=GenConfig.theta)

    t = common(sub.add_parser("train-cnn", help="train the AD/NC network"))
    t.add_argument("--manifest")
    t.add_argument("--eval-manifest")
    t.add_argument("--scale", default="1/8", help="channel scale factor, e.g. 1 or 1/8")
    t.add_argument("--iters", type=int, default=4000)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--eval-every", type=int, default=2000)
    t.add_argument("--no-augment", action="store_true")

    e = common(sub.add_parser("extract-features", help="write per-subject deep features"))
    e.add_argument("--manifest")
    e.add_argument("--model")

    f = common(sub.add_parser("fit-cox", help="fit LASSO-Cox on features or Cox on clinical covariates"))
    f.add_argument("--manifest")
    f.add_argument("--features")
    f.add_argument("--predictions", help="predictions CSV whose eta enters --combined fits as imaging_eta")
    f.add_argument("--clinical", action="store_true")
    f.add_argument("--combined", action="store_true")
    f.add_argument("--covariates", default=DEFAULT_CLINICAL)
    f.add_argument("--folds", type=int, default=10)
    f.add_argument("--mci-only", action="store_true")

    pr = common(sub.add_parser("predict", help="risk scores and progression probabilities"))
    pr.add_argument("--manifest")
    pr.add_argument("--coxfit")
    pr.add_argument("--features")
    pr.add_argument("--predictions")
    pr.add_argument("--horizon", default="12,24,36")

    ev = common(sub.add_parser("evaluate", help="C-index and time-dependent AUC"))
    ev.add_argument("--manifest")
    ev.add_argument("--predictions")
    ev.add_argument("--horizon", default="")
    ev.add_argument("--tie-rule", choices=metrics.TIE_RULES, default="strict")
    ev.add_argument("--n-boot", type=int, default=2000)

    st = common(sub.add_parser("stratify", help="risk quartile groups, KM curves, log-rank"))
    st.add_argument("--manifest")
    st.add_argument("--predictions")
    st.add_argument("--adjust", default="", help="clinical covariates for an adjusted likelihood-ratio test")

    rm = common(sub.add_parser("relevance-map", help="AD-class activation maps"))
    rm.add_argument("--manifest")
    rm.add_argument("--model")
    rm.add_argument("--subjects", default="")
    rm.add_argument("--per-subject", action="store_true")
    return p, sub


def _apply_config(parser, sub, argv):
    """Re-parse with defaults taken from --config (command-line flags win)."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    cfg = read_config(args.config)
    sp = sub.choices[args.command]
    known = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, value in cfg.items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"config key {key!r} is not an option of {args.command}")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(value) if action.type else value
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser, sub = build_parser()
    try:
        args = _apply_config(parser, sub, argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    except (HipposurvError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
