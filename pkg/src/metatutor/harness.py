"""Experiment protocols, synthetic corpus generation and result reporting.

Exp1 routes forest-predicted Default/StrOnly students in the experimental
condition through a fixed plan of worked examples and directly presented BC
problems. Exp2 lets a trained Q-network choose an intervention at every
decision slot. Both end with the logic post-test and the probability tutor.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ._config import config_from_mapping, config_to_dict
from .deepq import Policy, select_action
from .domain import (
    N_ACTIONS,
    N_TRAINING,
    InterventionAction,
    MetaGroup,
    ReplayCorpus,
    TransitionRecord,
    derived_rng,
    is_last_in_level,
    slot_mask,
)
from .forest import Forest, LabeledSample, predict
from .sim import (
    SimConfig,
    StudentProfile,
    TutorEnv,
    extract_features,
    run_logic_posttest,
    run_logic_pretest,
    run_probability_phase,
    sample_cohort,
)
from .stats import ChiSquareResult, Summary, chi_square_independence, describe, nlg

METRICS = ("Pre", "IsoPost", "IsoNLG", "Post", "NLG")
TUTORS = ("Logic", "Probability")
ROW_ORDER = ("Default_Exp", "StrOnly_Exp", "Default_Ctrl", "StrOnly_Ctrl", "StrTime")
LAST_IN_LEVEL = tuple(p for p in range(1, N_TRAINING + 1) if is_last_in_level(p))


# --- configuration ---------------------------------------------------------------------


def _sim_from(value) -> SimConfig:
    if isinstance(value, SimConfig):
        return value
    return config_from_mapping(SimConfig, value or {})


@dataclass(frozen=True)
class CorpusConfig:
    """Cohort and logging-policy settings for the synthetic replay corpus."""

    group_mix: tuple[float, float, float] = (0.4, 0.4, 0.2)
    logging_probs: tuple[float, float, float] = (0.5, 0.3, 0.2)
    sim: SimConfig = SimConfig()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sim", _sim_from(self.sim))
        p = self.logging_probs
        if len(p) != N_ACTIONS or any(x < 0 for x in p) or abs(sum(p) - 1.0) > 1e-9:
            raise ValueError(f"logging_probs must be {N_ACTIONS} non-negative values summing to 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Cohort, condition split and static-plan settings for one experiment run."""

    n_students: int = 110
    group_mix: tuple[float, float, float] = (0.4, 0.4, 0.2)
    experimental_fraction: float = 0.5
    we_positions: tuple[int, ...] = (5, 6)
    direct_positions: tuple[int, ...] = (7, 9, 10, 13, 14, 17)
    sim: SimConfig = SimConfig()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sim", _sim_from(self.sim))
        if not 0.0 <= self.experimental_fraction <= 1.0:
            raise ValueError("experimental_fraction must be in [0, 1]")
        build_static_plan(self.we_positions, self.direct_positions)


def load_nested_config(cls, path):
    """JSON config where the optional ``sim`` key holds simulator overrides."""
    if path is None:
        return cls()
    with open(path, encoding="utf-8") as fh:
        mapping = json.load(fh)
    if not isinstance(mapping, dict):
        raise ValueError(f"{path}: config document must be a key/value object")
    return config_from_mapping(cls, mapping)


def nested_config_to_dict(config) -> dict:
    out = config_to_dict(config)
    out["sim"] = config_to_dict(config.sim)
    return out


# --- plans and protocols ---------------------------------------------------------------


@dataclass(frozen=True)
class InterventionPlan:
    we_positions: frozenset[int] = frozenset()
    direct_positions: frozenset[int] = frozenset()

    def action_at(self, position: int) -> InterventionAction:
        if position in self.direct_positions:
            return InterventionAction.DirectPresent
        return InterventionAction.NoIntervention


def build_static_plan(we_positions: Iterable[int] = (5, 6),
                      direct_positions: Iterable[int] = (7, 9, 10, 13, 14, 17)) -> InterventionPlan:
    we, direct = frozenset(int(p) for p in we_positions), frozenset(int(p) for p in direct_positions)
    for p in sorted(we | direct):
        if not 1 <= p <= N_TRAINING:
            raise ValueError(f"plan position {p} outside [1, {N_TRAINING}]")
        if is_last_in_level(p):
            raise ValueError(f"plan position {p} is the last problem of its level")
    overlap = we & direct
    if overlap:
        raise ValueError(f"positions {sorted(overlap)} are both worked examples and direct presentations")
    return InterventionPlan(we, direct)


class Protocol(enum.Enum):
    Exp1Static = "exp1"
    Exp2Adaptive = "exp2"


class Condition(enum.Enum):
    Experimental = "Exp"
    Control = "Ctrl"


def decision_slots(we_positions: Iterable[int] = ()) -> tuple[int, ...]:
    we = set(we_positions)
    return tuple(p for p in range(1, N_TRAINING + 1) if not is_last_in_level(p) and p not in we)


# --- corpus generation -----------------------------------------------------------------


def _corpus_student(args) -> list[TransitionRecord]:
    profile, seed, config = args
    env = TutorEnv(profile, derived_rng(seed, "corpus-env", profile.student_id), config.sim)
    act_rng = derived_rng(seed, "corpus-log", profile.student_id)
    probs = np.asarray(config.logging_probs)
    records = []
    while not env.done:
        position = env.next_position
        state = extract_features(env)
        draw = int(act_rng.choice(N_ACTIONS, p=probs))
        action = InterventionAction(draw) if slot_mask(position)[draw] else InterventionAction.NoIntervention
        step = env.step(action)
        records.append(TransitionRecord(profile.student_id, f"L-train-{position}", position,
                                        tuple(state.tolist()), action, float(step.reward), step.done))
    return records


def _map(fn: Callable, jobs: Sequence, workers: int) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(job) for job in jobs]


def generate_corpus(n_students: int, seed: int, config: CorpusConfig = CorpusConfig(),
                    workers: int = 1) -> ReplayCorpus:
    """Replay corpus of ``n_students`` simulated students under the randomized logging policy."""
    if n_students < 1:
        raise ValueError("n_students must be >= 1")
    cohort = sample_cohort(n_students, config.group_mix, seed, config.sim)
    per_student = _map(_corpus_student, [(p, seed, config) for p in cohort], workers)
    return ReplayCorpus.from_records(r for recs in per_student for r in recs)


# --- incoming-competence features ------------------------------------------------------


INCOMING_FEATURES = ("score", "time", "switched", "switch_fraction")


def incoming_features(pretest) -> tuple[float, ...]:
    """Per pre-test problem: score/100, normalized time, switch flag, switch point as share of time."""
    out = []
    for p in pretest.problems:
        out += [p.score / 100.0, p.time_norm, float(p.switched), p.switch_time / p.time if p.switched else 0.0]
    return tuple(out)


def _labeled_student(args) -> LabeledSample:
    profile, seed, sim = args
    pre = run_logic_pretest(profile, derived_rng(seed, "pre", profile.student_id), sim)
    return LabeledSample(incoming_features(pre), profile.group)


def generate_labeled(n_students: int, seed: int, group_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
                     sim: SimConfig = SimConfig(), workers: int = 1) -> list[LabeledSample]:
    """Archetype-labeled pre-test features for training the group classifier."""
    if n_students < 1:
        raise ValueError("n_students must be >= 1")
    cohort = sample_cohort(n_students, group_mix, seed, sim)
    return _map(_labeled_student, [(p, seed, sim) for p in cohort], workers)


# --- experiment runs -------------------------------------------------------------------


@dataclass(frozen=True)
class StudentTrace:
    student_id: str
    group: MetaGroup
    predicted: MetaGroup
    condition: Condition
    actions: tuple[int, ...]
    we_positions: tuple[int, ...]
    logic: tuple[float, float, float]
    probability: tuple[float, float, float]

    @property
    def row(self) -> str:
        if self.predicted is MetaGroup.StrTime:
            return "StrTime"
        return f"{self.predicted.name}_{self.condition.value}"


@dataclass(frozen=True)
class _Assignment:
    profile: StudentProfile
    predicted: MetaGroup
    condition: Condition
    protocol: Protocol
    plan: InterventionPlan
    policy: Policy | None
    seed: int
    sim: SimConfig


def _pretest(args):
    profile, seed, sim = args
    return run_logic_pretest(profile, derived_rng(seed, "pre", profile.student_id), sim)


def _train_and_test(job: _Assignment) -> tuple[StudentTrace, float]:
    profile, sim = job.profile, job.sim
    pre = run_logic_pretest(profile, derived_rng(job.seed, "pre", profile.student_id), sim)
    experimental = job.condition is Condition.Experimental
    if job.protocol is Protocol.Exp1Static and job.predicted is MetaGroup.StrTime:
        experimental = False
    we = tuple(sorted(job.plan.we_positions)) if experimental else ()
    rng = derived_rng(job.seed, "train", profile.student_id)
    env = TutorEnv(profile, rng, sim, worked_examples=we)
    while not env.done:
        position = env.next_position
        mask = slot_mask(position, we)
        if not experimental or not mask[1]:
            action = InterventionAction.NoIntervention
        elif job.protocol is Protocol.Exp1Static:
            action = job.plan.action_at(position)
        else:
            action = select_action(job.policy, extract_features(env), mask)
        env.step(action)
    post = run_logic_posttest(env, rng)
    prob = run_probability_phase(profile, env.bc_knowledge, rng, sim)
    trace = StudentTrace(
        student_id=profile.student_id,
        group=profile.group,
        predicted=job.predicted,
        condition=job.condition,
        actions=tuple(int(a) for a in env.actions),
        we_positions=we,
        logic=(pre.score, post.iso_score, post.score),
        probability=(float(prob.pre), float(prob.iso_post), float(prob.post)),
    )
    return trace, env.bc_knowledge


def assign_conditions(student_ids: Sequence[str], predicted: Sequence[MetaGroup], fraction: float,
                      seed: int) -> dict[str, Condition]:
    """Stratified split: within each predicted group round(fraction * m) students are experimental."""
    out = {}
    for group in MetaGroup:
        members = sorted(s for s, g in zip(student_ids, predicted) if g is group)
        order = derived_rng(seed, "assign", group.name).permutation(len(members))
        n_exp = int(math.floor(fraction * len(members) + 0.5))
        for rank, i in enumerate(order):
            out[members[i]] = Condition.Experimental if rank < n_exp else Condition.Control
    return out


def run_experiment(protocol: Protocol | str, config: ExperimentConfig, forest: Forest,
                   policy: Policy | None = None, seed: int = 0, workers: int = 1) -> "ResultsTable":
    protocol = Protocol(protocol)
    if protocol is Protocol.Exp2Adaptive and policy is None:
        raise ValueError("the adaptive protocol needs a trained policy")
    if forest is None:
        raise ValueError("a trained forest is needed to predict metacognitive groups")
    if config.n_students < 2:
        raise ValueError("cohort too small to split into conditions (need at least 2 students)")
    sim = config.sim
    cohort = sample_cohort(config.n_students, config.group_mix, seed, sim)
    pretests = _map(_pretest, [(p, seed, sim) for p in cohort], workers)
    predicted = [predict(forest, incoming_features(pre))[0] for pre in pretests]
    conditions = assign_conditions([p.student_id for p in cohort], predicted, config.experimental_fraction, seed)
    plan = build_static_plan(config.we_positions, config.direct_positions)
    jobs = [_Assignment(p, g, conditions[p.student_id], protocol, plan, policy, seed, sim)
            for p, g in zip(cohort, predicted)]
    results = _map(_train_and_test, jobs, workers)
    return build_table(protocol, [trace for trace, _ in results])


# --- results ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    label: str
    n: int
    cells: Mapping[tuple[str, str], Summary]
    actions: tuple[int, int, int] | None = None

    def summary(self, tutor: str, metric: str) -> Summary:
        return self.cells[(tutor, metric)]


@dataclass(frozen=True)
class ResultsTable:
    protocol: Protocol
    rows: tuple[ResultRow, ...]
    traces: tuple[StudentTrace, ...] = field(default=(), compare=False)

    def row(self, label: str) -> ResultRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.rows]


def _safe_nlg(pre: float, post: float) -> float:
    # scores are put on a [0, 1] scale first; a perfect pre-test leaves the gain undefined
    try:
        return nlg(pre / 100.0, post / 100.0, 1.0)
    except ZeroDivisionError:
        return math.nan


def _summarize(values: Sequence[float]) -> Summary:
    finite = [v for v in values if not math.isnan(v)]
    if not finite:
        return Summary(math.nan, math.nan, 0)
    return describe(finite)


def _metric_values(scores: tuple[float, float, float]) -> dict[str, float]:
    pre, iso, post = scores
    return {"Pre": pre, "IsoPost": iso, "IsoNLG": _safe_nlg(pre, iso), "Post": post, "NLG": _safe_nlg(pre, post)}


def count_actions(traces: Iterable[StudentTrace]) -> tuple[int, int, int]:
    """Action counts over decision slots of experimental students."""
    counts = [0] * N_ACTIONS
    for t in traces:
        if t.condition is not Condition.Experimental or not t.we_positions:
            continue
        for p in decision_slots(t.we_positions):
            counts[t.actions[p - 1]] += 1
    return tuple(counts)


def build_table(protocol: Protocol, traces: Sequence[StudentTrace]) -> ResultsTable:
    rows = []
    for label in ROW_ORDER:
        members = [t for t in traces if t.row == label]
        if not members:
            continue
        cells = {}
        for tutor in TUTORS:
            per = [_metric_values(t.logic if tutor == "Logic" else t.probability) for t in members]
            for m in METRICS:
                cells[(tutor, m)] = _summarize([v[m] for v in per])
        has_plan = any(t.we_positions for t in members)
        rows.append(ResultRow(label, len(members), cells, count_actions(members) if has_plan else None))
    return ResultsTable(protocol, tuple(rows), tuple(traces))


@dataclass(frozen=True)
class ActionReport:
    labels: tuple[str, ...]
    counts: tuple[tuple[int, int, int], ...]
    chi_square: ChiSquareResult | None
    notice: str = ""


def action_distribution_report(results: ResultsTable | Mapping[str, Sequence[int]]) -> ActionReport:
    """Chi-square test of intervention-action distributions across experimental groups."""
    if isinstance(results, ResultsTable):
        table = {r.label: r.actions for r in results.rows
                 if r.actions is not None and r.label.endswith("_Exp")}
    else:
        table = {k: tuple(int(c) for c in v) for k, v in results.items()}
    if not table:
        raise ValueError("no experimental groups with intervention counts")
    labels = tuple(table)
    counts = tuple(tuple(table[k]) for k in labels)
    if sum(map(sum, counts)) == 0:
        raise ValueError("intervention counts are all zero")
    if len(labels) < 2:
        return ActionReport(labels, counts, None, "chi-square skipped: only one experimental group")
    # actions nobody received carry no information and would zero a marginal
    used = [j for j in range(N_ACTIONS) if any(row[j] for row in counts)]
    if len(used) < 2:
        return ActionReport(labels, counts, None, "chi-square skipped: only one action used")
    return ActionReport(labels, counts, chi_square_independence([[row[j] for j in used] for row in counts]))


# --- rendering -------------------------------------------------------------------------


def _round(value: float, places: int) -> str:
    if math.isnan(value):
        return "nan"
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


CSV_COLUMNS = (["row", "n"]
               + [f"{t}_{m}_{s}" for t in TUTORS for m in METRICS for s in ("mean", "sd")]
               + [f"actions_{a.token}" for a in InterventionAction])


def render_report(results: ResultsTable, fmt: str = "text") -> bytes:
    if fmt == "csv":
        return _render_csv(results)
    if fmt == "text":
        return _render_text(results)
    raise ValueError(f"unknown report format {fmt!r}")


def _render_csv(results: ResultsTable) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results.rows:
        line = [r.label, r.n]
        for t in TUTORS:
            for m in METRICS:
                s = r.cells[(t, m)]
                line += [repr(s.mean), repr(s.sd)]
        line += list(r.actions) if r.actions is not None else [""] * N_ACTIONS
        writer.writerow(line)
    return buf.getvalue().encode("utf-8")


def parse_csv_report(data: bytes | str, protocol: Protocol | str = Protocol.Exp1Static) -> ResultsTable:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_COLUMNS:
        raise ValueError("unexpected report header")
    rows = []
    for line in reader:
        label, n = line[0], int(line[1])
        cells, k = {}, 2
        for t in TUTORS:
            for m in METRICS:
                cells[(t, m)] = Summary(float(line[k]), float(line[k + 1]), n)
                k += 2
        actions = None if line[k] == "" else tuple(int(c) for c in line[k:k + N_ACTIONS])
        rows.append(ResultRow(label, n, cells, actions))
    return ResultsTable(Protocol(protocol), tuple(rows))


def _render_text(results: ResultsTable) -> bytes:
    header = ["Group", "N"] + [f"{t[:5]} {m}" for t in TUTORS for m in METRICS] + ["none/nudge/present"]
    lines = [header]
    for r in results.rows:
        cells = [r.label, str(r.n)]
        for t in TUTORS:
            for m in METRICS:
                s = r.cells[(t, m)]
                places = 2 if m.endswith("NLG") else 1
                cells.append(f"{_round(s.mean, places)} ({_round(s.sd, places)})")
        cells.append("/".join(map(str, r.actions)) if r.actions is not None else "-")
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)
    return (f"protocol: {results.protocol.value}\n" + out + "\n").encode("utf-8")
