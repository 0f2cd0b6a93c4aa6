"""Command-line entry point: corpus generation, model training, experiments, statistics.

Exit codes: 0 success, 1 invalid input or configuration, 2 file I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from ._config import config_from_mapping, load_config
from .deepq import TrainConfig, load_policy, save_policy, train
from .domain import load_corpus, save_corpus
from .forest import ForestConfig, load_forest, load_labeled, oob_accuracy, save_forest, save_labeled, train_forest
from .harness import (
    CorpusConfig,
    ExperimentConfig,
    action_distribution_report,
    generate_corpus,
    generate_labeled,
    load_nested_config,
    render_report,
    run_experiment,
)
from .sim import SimConfig, fit_switch_distribution, read_switch_times, simulated_switch_times
from .stats import Summary, chi_square_independence, describe, nlg, one_way_anova, t_test_ind


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _sim_config(path) -> SimConfig:
    return load_config(SimConfig, path)


# --- commands --------------------------------------------------------------------------


def cmd_gen_corpus(args) -> None:
    config = load_nested_config(CorpusConfig, args.config)
    corpus = generate_corpus(args.students, args.seed, config, workers=args.workers)
    with open(args.out, "wb") as fh:
        save_corpus(corpus, fh)
    _emit(f"wrote {len(corpus)} records for {len(corpus.students)} students to {args.out}")


def cmd_gen_labeled(args) -> None:
    mix = tuple(args.mix) if args.mix else (1 / 3, 1 / 3, 1 / 3)
    samples = generate_labeled(args.students, args.seed, mix, _sim_config(args.config), workers=args.workers)
    with open(args.out, "w", encoding="utf-8") as fh:
        save_labeled(samples, fh)
    _emit(f"wrote {len(samples)} labeled samples to {args.out}")


def cmd_fit_switch_dist(args) -> None:
    if args.input:
        times = read_switch_times(args.input)
    else:
        times = simulated_switch_times(args.n, args.seed, _sim_config(args.config))
    dist = fit_switch_distribution(times)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.writelines(f"{v!r}\n" for v in dist.values)
    lo, hi = dist.support
    _emit(f"fitted {len(dist.values)} switch times, support [{lo:.3f}, {hi:.3f}] s, to {args.out}")


def cmd_train_policy(args) -> None:
    config = load_config(TrainConfig, args.config)
    with open(args.corpus, "rb") as fh:
        corpus = load_corpus(fh)
    result = train(corpus, config)
    policy = result.best_policy if args.checkpoint == "best" and result.best_policy else result.policy
    with open(args.out, "w", encoding="utf-8") as fh:
        save_policy(policy, fh)
    if args.loss_out:
        with open(args.loss_out, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_mse,heldout_mse\n")
            for i, (a, b) in enumerate(zip(result.train_loss, result.test_loss)):
                fh.write(f"{i},{a!r},{b!r}\n")
    last = f"{result.train_loss[-1]:.4f}/{result.test_loss[-1]:.4f}" if result.train_loss else "n/a"
    _emit(f"trained {config.epochs} epochs on {len(corpus)} records (final train/held-out MSE {last}); "
          f"policy written to {args.out}")


def cmd_train_rfc(args) -> None:
    mapping = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            mapping = json.load(fh)
        if not isinstance(mapping, dict):
            raise ValueError(f"{args.config}: config document must be a key/value object")
    seed = int(mapping.pop("seed", args.seed))
    config = config_from_mapping(ForestConfig, mapping)
    with open(args.corpus, encoding="utf-8") as fh:
        data = load_labeled(fh)
    forest = train_forest(data, config, seed=seed, workers=args.workers)
    with open(args.out, "w", encoding="utf-8") as fh:
        save_forest(forest, fh)
    _emit(f"trained {config.n_trees} trees on {len(data)} samples (OOB accuracy {oob_accuracy(forest, data):.3f}); "
          f"forest written to {args.out}")


def cmd_run_exp(args) -> None:
    config = load_nested_config(ExperimentConfig, args.cohort)
    with open(args.forest, encoding="utf-8") as fh:
        forest = load_forest(fh)
    policy = None
    if args.policy:
        with open(args.policy, "rb") as fh:
            policy = load_policy(fh)
    results = run_experiment(args.protocol, config, forest, policy, seed=args.seed, workers=args.workers)
    report = render_report(results, args.format)
    with open(args.out, "wb") as fh:
        fh.write(report)
    summary = [f"wrote {args.format} report for {sum(r.n for r in results.rows)} students to {args.out}"]
    try:
        actions = action_distribution_report(results)
        if actions.chi_square is not None:
            c = actions.chi_square
            summary.append(f"action distribution: chi2({c.df}, N={c.n}) = {c.chi2:.2f}, p = {c.p:.3f}")
        elif actions.notice:
            summary.append(actions.notice)
    except ValueError as exc:
        summary.append(f"action distribution: {exc}")
    _emit("\n".join(summary))


def _read_numbers(path: str) -> list[float]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        values = json.loads(text)
    else:
        values = text.replace(",", " ").split()
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError):
        raise ValueError(f"{path}: expected a list of numbers") from None


def _read_table(path: str) -> list[list[float]]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        rows = json.loads(text)
    else:
        rows = [line.replace(",", " ").split() for line in text.splitlines() if line.strip()]
    try:
        return [[float(v) for v in row] for row in rows]
    except (TypeError, ValueError):
        raise ValueError(f"{path}: expected rows of numbers") from None


def _jsonable(value):
    return value if not isinstance(value, float) or math.isfinite(value) else str(value)


def cmd_stats(args) -> None:
    inputs = args.inputs or []
    summaries = [Summary(float(m), float(s), int(n)) for m, s, n in (args.summary or [])]
    if args.test == "chi2":
        if len(inputs) != 1:
            raise ValueError("chi2 takes exactly one contingency-table file")
        r = chi_square_independence(_read_table(inputs[0]))
        out = {"test": "chi2", "chi2": r.chi2, "df": r.df, "p": r.p, "n": r.n}
    elif args.test == "ttest":
        groups = [_read_numbers(p) for p in inputs] + summaries
        if len(groups) != 2:
            raise ValueError("ttest needs exactly two groups (files or --summary)")
        r = t_test_ind(groups[0], groups[1], equal_var=not args.welch)
        out = {"test": "ttest", "t": r.t, "df": r.df, "p": r.p, "d": r.d, "welch": args.welch}
    elif args.test == "anova":
        groups = [_read_numbers(p) for p in inputs]
        r = one_way_anova(groups)
        out = {"test": "anova", "F": r.F, "df_between": r.df_between, "df_within": r.df_within, "p": r.p,
               "degenerate": r.degenerate}
    else:
        pairs = []
        for p in inputs:
            pairs += [tuple(row) for row in _read_table(p)]
        if args.pre is not None or args.post is not None:
            if args.pre is None or args.post is None:
                raise ValueError("--pre and --post go together")
            pairs.append((args.pre, args.post))
        if not pairs or any(len(row) != 2 for row in pairs):
            raise ValueError("nlg needs (pre, post) pairs")
        gains = [nlg(pre, post, args.max_score) for pre, post in pairs]
        out = {"test": "nlg", "max_score": args.max_score, "nlg": gains}
        if len(gains) >= 2:
            s = describe(gains)
            out.update(mean=s.mean, sd=s.sd, n=s.n)
    _emit(json.dumps({k: _jsonable(v) for k, v in out.items()}))


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metatutor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="simulate a replay corpus under the randomized logging policy")
    p.add_argument("--students", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON corpus config (group_mix, logging_probs, sim)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("gen-labeled", help="simulate archetype-labeled incoming-competence samples")
    p.add_argument("--students", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", type=float, nargs=3, metavar=("DEFAULT", "STRONLY", "STRTIME"))
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON simulator config")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_labeled)

    p = sub.add_parser("fit-switch-dist", help="fit the empirical nudge-timing distribution")
    p.add_argument("--in", dest="input", help="switch times in seconds, one per line (default: simulate)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500, help="simulated sample size when --in is absent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON simulator config")
    p.set_defaults(func=cmd_fit_switch_dist)

    p = sub.add_parser("train-policy", help="offline double-DQN training on a replay corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", choices=("final", "best"), default="final")
    p.add_argument("--loss-out", help="optional CSV of per-epoch train and held-out MSE")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("train-rfc", help="train the group-prediction random forest")
    p.add_argument("--corpus", required=True, help="labeled samples, one JSON object per line")
    p.add_argument("--config", help="JSON forest config (n_trees, min_leaf, features_per_split, max_depth, seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_train_rfc)

    p = sub.add_parser("run-exp", help="run one experiment protocol end to end")
    p.add_argument("--protocol", choices=("exp1", "exp2"), required=True)
    p.add_argument("--cohort", help="JSON experiment config")
    p.add_argument("--forest", required=True)
    p.add_argument("--policy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_run_exp)

    p = sub.add_parser("stats", help="significance tests and learning gains")
    p.add_argument("--test", choices=("ttest", "anova", "chi2", "nlg"), required=True)
    p.add_argument("--in", dest="inputs", nargs="+", metavar="FILE")
    p.add_argument("--summary", nargs=3, action="append", metavar=("MEAN", "SD", "N"),
                   help="group given by summary statistics (ttest only)")
    p.add_argument("--welch", action="store_true", help="unequal-variance t-test")
    p.add_argument("--pre", type=float)
    p.add_argument("--post", type=float)
    p.add_argument("--max-score", type=float, default=100.0)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, ZeroDivisionError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
