"""Command-line entry point: simulate, fit, eval, slices, historygap, slice-diff, recovery.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort,
5 unsupported model for the requested analysis.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from learnrule import analysis as A
from learnrule import io as lio
from learnrule import model as M
from learnrule.glm import ContractError
from learnrule.inference import FitConfig, NumericalAbort, chance_model, fit, heldout_log_likelihood
from learnrule.rules import RuleParams
from learnrule.simulate import ConfigError, simulate_pool

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_UNSUPPORTED = 0, 2, 3, 4, 5

log = logging.getLogger("learnrule")


def _out_dir(args, doc):
    d = Path(args.out_dir or doc.get("output_dir", "."))
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_simulate(args):
    doc = lio.read_run_config(args.config)
    cfg = lio.sim_config(doc, seed=args.seed)
    animals = simulate_pool(cfg)
    out = _out_dir(args, doc)
    lio.write_dataset([a.session for a in animals], out / "dataset.csv")
    lio.write_latents(animals, out / "latents.csv")
    rule = cfg.rule if cfg.mixture is None else "mixture"
    name = rule if isinstance(rule, str) else f"{rule.kind}(alpha={rule.learning_rate:.6g})"
    print(f"simulated n_animals={cfg.n_animals} T={cfg.T} rule={name} seed={cfg.master_seed} -> {out}")
    return EXIT_OK


def _fit_config(args):
    if args.config:
        return lio.fit_config(lio.read_run_config(args.config), seed=args.seed)
    return FitConfig(seed=args.seed or 0)


def cmd_fit(args):
    cfg = _fit_config(args)
    if args.epochs:
        cfg = FitConfig(**{**cfg.to_dict(), "epochs": args.epochs})
    sessions = lio.read_dataset(args.data)
    t0 = time.perf_counter()
    model = fit(sessions, args.kind, cfg)
    wall = time.perf_counter() - t0
    digest = lio.save_model(model, args.out)
    diag = model.diagnostics
    train_ll = heldout_log_likelihood(model, sessions)["total"]
    report = {
        "format_version": 1,
        "kind": args.kind,
        "model_sha256": digest,
        "dataset_sha256": lio.sha256_file(args.data),
        "seed": cfg.seed,
        "epochs_run": diag["epochs_run"],
        "best_epoch": diag["best_epoch"],
        "final_train_loss": diag["train_loss"][-1] if diag["train_loss"] else None,
        "final_val_ll": diag["val_ll"][-1] if diag["val_ll"] else None,
        "train_ll": train_ll,
        "train_loss_curve": diag["train_loss"],
        "val_ll_curve": diag["val_ll"],
        "n_train": diag["n_train"],
        "n_val": diag["n_val"],
        "config": cfg.to_dict(),
    }
    if args.timing:
        report["wall_time"] = wall
    report_path = args.report or str(Path(args.out).with_suffix(".fit.json"))
    lio.write_json(report, report_path, schema="fit_report")
    print(f"fit {args.kind}: epochs={diag['epochs_run']} best={diag['best_epoch']} "
          f"train_ll={train_ll:.4f} wall={wall:.1f}s sha256={digest[:12]}")
    return EXIT_OK


def _summary_table(report):
    lines = [f"protocol={report.protocol}"]
    lines.append(f"{'model':<28}{'total LL':>16}{'LL/trial':>12}")
    for k in report.kinds:
        tot = report.totals[k]
        lines.append(f"{k:<28}{tot['seeds_then_animals']:>16.4f}{tot['per_trial_mean']:>12.5f}")
    for t in report.tests:
        lines.append(f"{t['a']} vs {t['b']}: t={t['t']:.4g} p={t['p']:.4g}" + (" (degenerate)" if t["degenerate"] else ""))
    return "\n".join(lines)


def cmd_eval(args):
    sessions = lio.read_dataset(args.data)
    models, hashes = {}, {}
    for path in args.models:
        m = lio.load_model(path)
        label = f"{m.kind}:{Path(path).stem}"
        models[label] = m
        hashes[label] = lio.sha256_file(path)
    if args.chance:
        models["chance"] = chance_model()
    if not models:
        raise ConfigError("eval needs at least one model (or --chance)")
    if args.protocol == "animals":
        kinds = [m.kind if lbl != "chance" else "chance" for lbl, m in models.items()]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("animal-held-out refits by kind; pass one model per kind")
        base = next((m.config for m in models.values() if m.kind != "chance"), FitConfig())
        if args.seed is not None:
            base = FitConfig(**{**base.to_dict(), "seed": args.seed})
        seeds = args.seeds or [base.seed]
        report = A.crossval_animals(sessions, kinds, K=args.K, seeds=seeds, config=base,
                                    split_seed=args.split_seed, n_jobs=args.jobs)
    else:
        report = A.report_from_models(models, sessions, args.protocol, args.split, args.horizon)
    report.metadata["dataset_sha256"] = lio.sha256_file(args.data)
    report.metadata["model_sha256"] = hashes
    if args.protocol == "future" and args.horizon == 0:
        report.degenerate = True
    lio.write_json(report.to_dict(), args.out, schema="eval_report")
    print(_summary_table(report))
    return EXIT_OK


def _model_or_rule(args):
    if args.model:
        return lio.load_model(args.model)
    rule = RuleParams(kind=args.rule, learning_rate=args.alpha, window=args.window)
    return A.GroundTruthModel(rule)


def cmd_slices(args):
    model = _model_or_rule(args)
    grid = A.SliceGrid(
        stimuli=tuple(args.stimuli) if args.stimuli else A.DEFAULT_STIMULI,
        w_levels=tuple(args.w_levels) if args.w_levels else A.DEFAULT_W_LEVELS,
        bias=args.bias,
        n_histories=args.n_histories,
        seed=args.seed or 0,
    )
    rows = A.update_slices(model, grid)
    lio.write_table(rows, args.out, ["stimulus", "w_stim", "outcome", "dw_stim", "dw_bias"])
    print(f"wrote {len(rows)} slice rows to {args.out}")
    return EXIT_OK


def cmd_historygap(args):
    model = _model_or_rule(args)
    if args.markov_adapter:
        model = A.MarkovAdapter(model)
    stimuli = tuple(args.stimuli) if args.stimuli else A.DEFAULT_STIMULI
    cond = A.HistoryCondition(k=args.k, offset=args.offset, w_stim=args.w_stim,
                              n_draws=args.n_draws, seed=args.seed or 0)
    gap = A.history_gap(model, cond, stimuli)
    rows = [{"stimulus": float(s), "k": args.k, "offset": args.offset, "gap": float(g)} for s, g in zip(stimuli, gap)]
    lio.write_table(rows, args.out, ["stimulus", "k", "offset", "gap"])
    print(f"mean gap {float(np.mean(gap)):.6g} over {len(stimuli)} stimuli -> {args.out}")
    return EXIT_OK


def cmd_slice_diff(args):
    a = lio.read_slice_table(args.a)
    b = lio.read_slice_table(args.b)
    print(lio.fmt(A.slice_rmse(a, b)))
    return EXIT_OK


def cmd_recovery(args):
    model = _model_or_rule(args)
    sessions = lio.read_dataset(args.data)
    animals = lio.attach_latents(sessions, lio.read_latents(args.latents))
    res = A.recovery_rmse(model, animals)
    print(lio.dumps(res), end="")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="learnrule", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("simulate", help="simulate a pool of learners")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit a learning-rule model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--kind", required=True, choices=M.MODEL_KINDS)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--timing", action="store_true", help="record wall time in the report")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("eval", help="held-out likelihood evaluation")
    sp.add_argument("--models", nargs="*", default=[])
    sp.add_argument("--data", required=True)
    sp.add_argument("--protocol", choices=["holdout", "future", "animals"], default="holdout")
    sp.add_argument("--split", type=int, default=0)
    sp.add_argument("--horizon", type=int, default=500)
    sp.add_argument("--K", type=int, default=5)
    sp.add_argument("--seeds", type=int, nargs="*")
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--chance", action="store_true")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    def rule_source(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--model")
        g.add_argument("--rule", choices=["reinforce", "max_likelihood", "etrace_reinforce"])
        sp.add_argument("--alpha", type=float, default=0.1)
        sp.add_argument("--window", type=int, default=10)

    sp = sub.add_parser("slices", help="update-function slices")
    rule_source(sp)
    sp.add_argument("--stimuli", type=float, nargs="*")
    sp.add_argument("--w-levels", type=float, nargs="*")
    sp.add_argument("--bias", type=float, default=0.0)
    sp.add_argument("--n-histories", type=int, default=100)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_slices)

    sp = sub.add_parser("historygap", help="rewarded minus unrewarded history update gap")
    rule_source(sp)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--offset", type=int, default=0)
    sp.add_argument("--w-stim", type=float, default=0.0)
    sp.add_argument("--n-draws", type=int, default=100)
    sp.add_argument("--stimuli", type=float, nargs="*")
    sp.add_argument("--markov-adapter", action="store_true")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_historygap)

    sp = sub.add_parser("slice-diff", help="RMSE between two slice tables")
    sp.add_argument("a")
    sp.add_argument("b")
    common(sp)
    sp.set_defaults(func=cmd_slice_diff)

    sp = sub.add_parser("recovery", help="update RMSE against simulator latents")
    rule_source(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--latents", required=True)
    common(sp)
    sp.set_defaults(func=cmd_recovery)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except M.UnsupportedModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except NumericalAbort as e:
        print(f"error: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
