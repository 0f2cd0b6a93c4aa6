"""Seeded student simulator for the logic and probability tutors.

A simulated student carries latent competence, strategy/time awareness and a
backward-chaining (BC) knowledge level that grows whenever a problem is solved
in BC. Problem scores combine accuracy, time and solution length; interventions
act by changing which strategy a problem is solved in.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import (
    DEFAULT_FEATURE_DIM,
    N_TRAINING,
    InterventionAction,
    MetaGroup,
    Score,
    derived_rng,
    level_of,
)

SIGNALS_PER_PROBLEM = 7
N_AGGREGATES = 12


@dataclass(frozen=True)
class SimConfig:
    # group thresholds
    strategy_threshold: float = 0.6
    time_threshold: float = 0.6
    # score model
    score_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    score_noise: float = 0.05
    accuracy_noise: float = 0.08
    length_noise: float = 0.05
    time_noise: float = 0.15
    difficulty_penalty: float = 0.09
    nominal_time: float = 60.0
    time_per_level: float = 30.0
    max_time: float = 600.0
    hint_scale: float = 3.0
    # strategy effects
    bc_bonus: float = 0.5
    bc_time_saving: float = 0.35
    bc_length_saving: float = 0.15
    nudge_base: float = 0.2
    nudge_slope: float = 0.75
    strtime_switch_level: int = 2
    stronly_switch_level: int = 4
    early_switch_fraction: tuple[float, float] = (0.05, 0.25)
    late_switch_fraction: tuple[float, float] = (0.55, 0.9)
    # learning
    competence_gain: float = 0.03
    bc_prior: float = 0.05
    bc_prior_slope: float = 0.3
    bc_learn_rate: float = 0.35
    bc_learn_floor: float = 0.0
    bc_learn_power: float = 3.0
    we_gain: float = 0.2
    nudge_awareness_gain: float = 0.3
    # logic tests
    pretest_level: float = 2.0
    posttest_level: float = 4.0
    pretest_switch_prob: tuple[float, float] = (0.05, 0.9)
    # probability tutor
    prob_pre_base: float = 0.3
    prob_pre_slope: float = 0.55
    prob_post_base: float = 0.2
    prob_post_slope: float = 0.5
    prob_transfer: float = 0.45
    prob_noise: float = 0.1
    # cohort sampling
    competence_mean: float = 0.55
    competence_sd: float = 0.18
    speed_sd: float = 0.2
    switch_dist_file: str | None = None

    def __post_init__(self) -> None:
        if abs(sum(self.score_weights) - 1.0) > 1e-9:
            raise ValueError("score_weights must sum to 1")
        for name in ("strategy_threshold", "time_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


@dataclass(frozen=True)
class StudentProfile:
    student_id: str
    competence: float
    strategy_awareness: float
    time_awareness: float
    hint_propensity: float
    speed: float
    group: MetaGroup


def classify_group(strategy_awareness: float, time_awareness: float, config: SimConfig = SimConfig()) -> MetaGroup:
    if strategy_awareness >= config.strategy_threshold:
        if time_awareness >= config.time_threshold:
            return MetaGroup.StrTime
        return MetaGroup.StrOnly
    return MetaGroup.Default


def _largest_remainder(n: int, mix: Sequence[float]) -> list[int]:
    quotas = [n * p for p in mix]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    # ties go to the lower group code
    order = sorted(range(len(mix)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def sample_cohort(n: int, group_mix: Sequence[float], seed: int,
                  config: SimConfig = SimConfig()) -> list[StudentProfile]:
    """Sample ``n`` profiles whose group counts are the rounded proportions of ``group_mix``."""
    if n < 0:
        raise ValueError("cohort size must be non-negative")
    mix = [float(p) for p in group_mix]
    if len(mix) != 3 or any(p < 0 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
        raise ValueError(f"group_mix must be 3 non-negative proportions summing to 1, got {group_mix}")
    counts = _largest_remainder(n, mix)
    rng = derived_rng(seed, "cohort")
    ts, tt = config.strategy_threshold, config.time_threshold
    labels = [g for g, c in zip(MetaGroup, counts) for _ in range(c)]
    labels = [labels[i] for i in rng.permutation(n)]

    profiles = []
    for i, group in enumerate(labels):
        if group is MetaGroup.Default:
            sa = rng.uniform(0.0, ts)
            ta = rng.uniform(0.0, 1.0)
        elif group is MetaGroup.StrOnly:
            sa = rng.uniform(ts, 1.0)
            ta = rng.uniform(0.0, tt)
        else:
            sa = rng.uniform(ts, 1.0)
            ta = rng.uniform(tt, 1.0)
        competence = float(np.clip(rng.normal(config.competence_mean, config.competence_sd), 0.05, 0.98))
        profiles.append(StudentProfile(
            student_id=f"s{i:04d}",
            competence=competence,
            strategy_awareness=float(sa),
            time_awareness=float(ta),
            hint_propensity=float(rng.uniform(0.0, 1.0)),
            speed=float(np.exp(rng.normal(0.0, config.speed_sd))),
            group=group,
        ))
    return profiles


# --- nudge timing --------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalDistribution:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("empirical distribution needs at least one value")
        if any(not math.isfinite(v) or v < 0 for v in self.values):
            raise ValueError("switch times must be finite and non-negative")
        if any(a > b for a, b in zip(self.values, self.values[1:])):
            raise ValueError("values must be sorted ascending")

    @property
    def support(self) -> tuple[float, float]:
        return self.values[0], self.values[-1]

    def quantile(self, u: float) -> float:
        """Inverse CDF with linear interpolation between order statistics."""
        if not 0.0 <= u <= 1.0:
            raise ValueError(f"quantile level {u} outside [0, 1]")
        pos = u * (len(self.values) - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, len(self.values) - 1)
        frac = pos - lo
        return self.values[lo] + frac * (self.values[hi] - self.values[lo])


def fit_switch_distribution(switch_times: Sequence[float]) -> EmpiricalDistribution:
    times = [float(t) for t in switch_times]
    if not times:
        raise ValueError("cannot fit a switch distribution to an empty sample")
    if any(t < 0 for t in times):
        raise ValueError("negative switch time")
    return EmpiricalDistribution(tuple(sorted(times)))


def sample_switch_time(dist: EmpiricalDistribution, rng) -> float:
    return dist.quantile(float(rng.random()))


def read_switch_times(path) -> list[float]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(float(line))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: not a number: {line.strip()!r}") from None
    return out


def simulated_switch_times(n: int = 500, seed: int = 0, config: SimConfig = SimConfig()) -> list[float]:
    """Switch times (seconds) of simulated StrTime students on training levels 2-5."""
    cohort = sample_cohort(n, (0.0, 0.0, 1.0), seed, config)
    rng = derived_rng(seed, "switch-times")
    times = []
    for profile in cohort:
        level = int(rng.integers(config.strtime_switch_level, 6))
        fc_time = _fc_time(profile, level, config, rng)
        times.append(fc_time * rng.uniform(*config.early_switch_fraction))
    return times


@functools.lru_cache(maxsize=8)
def _cached_switch_distribution(config: SimConfig) -> EmpiricalDistribution:
    if config.switch_dist_file:
        return fit_switch_distribution(read_switch_times(config.switch_dist_file))
    return fit_switch_distribution(simulated_switch_times(config=config))


def default_switch_distribution(config: SimConfig = SimConfig()) -> EmpiricalDistribution:
    return _cached_switch_distribution(config)


# --- problem solving -----------------------------------------------------------------


@dataclass(frozen=True)
class ProblemOutcome:
    time: float
    time_norm: float
    accuracy: float
    hints: int
    switched: bool
    used_bc: bool
    length_norm: float
    score: Score
    switch_time: float = 0.0
    worked_example: bool = False

    def signals(self) -> tuple[float, ...]:
        return (self.time_norm, self.accuracy, float(self.hints), float(self.switched),
                float(self.used_bc), self.length_norm, self.score / 100.0)


def _fc_time(profile: StudentProfile, level: float, config: SimConfig, rng) -> float:
    nominal = config.nominal_time + config.time_per_level * (level - 1)
    return nominal / profile.speed * float(np.exp(rng.normal(0.0, config.time_noise)))


def _switch_fraction(time_aware: bool, config: SimConfig, rng) -> float:
    lo, hi = config.early_switch_fraction if time_aware else config.late_switch_fraction
    return float(rng.uniform(lo, hi))


def _score(accuracy: float, time_norm: float, length_norm: float, config: SimConfig, rng) -> Score:
    wa, wt, wl = config.score_weights
    raw = wa * accuracy + wt * (1.0 - time_norm) + wl * (1.0 - length_norm)
    raw += rng.normal(0.0, config.score_noise) if config.score_noise > 0 else 0.0
    return Score(float(np.clip(100.0 * raw, 0.0, 100.0)))


def solve_problem(profile: StudentProfile, competence: float, bc_knowledge: float, level: float,
                  switch_at: float | None, direct_bc: bool, fc_time: float,
                  config: SimConfig, rng) -> ProblemOutcome:
    """Solve one problem; ``switch_at`` is seconds into the attempt when the student moves to BC.

    The BC benefit scales with the share of the attempt spent in BC, with the
    problem's level (BC pays off on harder problems) and with BC knowledge.
    """
    hard = max(0.0, min(level - 1.0, 4.5)) / 4.0
    if direct_bc:
        bc_share, switched, switch_time = 1.0, False, 0.0
    elif switch_at is not None and switch_at < fc_time:
        bc_share, switched, switch_time = 1.0 - switch_at / fc_time, True, switch_at
    else:
        bc_share, switched, switch_time = 0.0, False, 0.0
    used_bc = bc_share > 0.0
    skill = 0.4 + 0.6 * bc_knowledge

    acc_mean = competence * (1.0 - config.difficulty_penalty * (level - 1.0))
    acc_mean += bc_share * config.bc_bonus * hard * skill
    acc_mean = float(np.clip(acc_mean, 0.0, 1.0))
    accuracy = float(np.clip(acc_mean + rng.normal(0.0, config.accuracy_noise), 0.0, 1.0))

    if used_bc:
        bc_time = fc_time * (1.0 - config.bc_time_saving * hard * skill)
        time = switch_time + bc_time * bc_share
    else:
        time = fc_time
    time_norm = float(np.clip(time / config.max_time, 0.02, 1.0))

    length = 0.3 + 0.1 * (level - 1.0) - bc_share * config.bc_length_saving * hard * skill
    length_norm = float(np.clip(length + rng.normal(0.0, config.length_noise), 0.05, 1.0))

    hints = int(rng.poisson(profile.hint_propensity * (1.0 - acc_mean) * config.hint_scale))
    score = _score(accuracy, time_norm, length_norm, config, rng)
    return ProblemOutcome(time, time_norm, accuracy, hints, switched, used_bc, length_norm, score, switch_time)


def _worked_example_outcome(config: SimConfig, level: int) -> ProblemOutcome:
    # worked examples are shown, not solved: fixed nominal signals, no noise
    time = config.nominal_time + config.time_per_level * (level - 1)
    time_norm = float(np.clip(time / config.max_time, 0.02, 1.0))
    length_norm = 0.3
    wa, wt, wl = config.score_weights
    score = Score(100.0 * (wa * 1.0 + wt * (1.0 - time_norm) + wl * (1.0 - length_norm)))
    return ProblemOutcome(time, time_norm, 1.0, 0, False, True, length_norm, score, 0.0, worked_example=True)


class FinishedTrajectory(RuntimeError):
    pass


@dataclass(frozen=True)
class StepResult:
    features: np.ndarray
    reward: Score
    done: bool


class TutorEnv:
    """One student's pass through the 20 logic training problems.

    ``worked_examples`` holds 1-based positions shown as BC worked examples;
    those slots accept only ``NoIntervention``.
    """

    def __init__(self, profile: StudentProfile, rng: np.random.Generator,
                 config: SimConfig = SimConfig(), worked_examples: Sequence[int] = (),
                 switch_dist: EmpiricalDistribution | None = None):
        self.profile = profile
        self.config = config
        self.rng = rng
        self.worked_examples = frozenset(worked_examples)
        self.switch_dist = switch_dist or default_switch_distribution(config)
        self.cursor = 0
        self.history: list[ProblemOutcome] = []
        self.actions: list[InterventionAction] = []
        self.competence = profile.competence
        self.bc_knowledge = initial_bc_knowledge(profile, config)
        # working strategy awareness; complied nudges raise it, the profile stays fixed
        self.awareness = profile.strategy_awareness

    @property
    def done(self) -> bool:
        return self.cursor >= N_TRAINING

    @property
    def next_position(self) -> int:
        return self.cursor + 1

    def autonomous_switch_level(self) -> int | None:
        group = classify_group(self.profile.strategy_awareness, self.profile.time_awareness, self.config)
        if group is MetaGroup.StrTime:
            return self.config.strtime_switch_level
        if group is MetaGroup.StrOnly:
            return self.config.stronly_switch_level
        return None

    def step(self, action: InterventionAction) -> StepResult:
        if self.done:
            raise FinishedTrajectory("trajectory already finished")
        action = InterventionAction(action)
        cfg, rng = self.config, self.rng
        position = self.next_position
        level = level_of(position)
        sa = self.awareness
        gate = learning_gate(sa, cfg)

        if position in self.worked_examples:
            if action is not InterventionAction.NoIntervention:
                raise ValueError(f"position {position} is a worked example; only NoIntervention allowed")
            outcome = _worked_example_outcome(cfg, level)
            self.bc_knowledge += cfg.we_gain * gate * (1.0 - self.bc_knowledge)
        else:
            fc_time = _fc_time(self.profile, level, cfg, rng)
            # draws happen unconditionally so the stream position does not depend on the action
            nudge_time = sample_switch_time(self.switch_dist, rng)
            complies = rng.random() < nudge_compliance(self.profile.strategy_awareness, cfg)
            own_fraction = _switch_fraction(self.profile.time_awareness >= cfg.time_threshold, cfg, rng)

            candidates = []
            switch_level = self.autonomous_switch_level()
            if switch_level is not None and level >= switch_level:
                candidates.append(own_fraction * fc_time)
            if action is InterventionAction.Nudge and complies:
                candidates.append(nudge_time)
            switch_at = min(candidates) if candidates else None
            outcome = solve_problem(self.profile, self.competence, self.bc_knowledge, level, switch_at,
                                    action is InterventionAction.DirectPresent, fc_time, cfg, rng)
            if outcome.used_bc:
                share = 1.0 if not outcome.switched else 1.0 - outcome.switch_time / fc_time
                rate = cfg.bc_learn_rate * gate
                self.bc_knowledge += rate * share * (1.0 - self.bc_knowledge)
            if action is InterventionAction.Nudge and complies:
                self.awareness += cfg.nudge_awareness_gain * (1.0 - self.awareness)
        self.competence += cfg.competence_gain * (1.0 - self.competence)
        self.history.append(outcome)
        self.actions.append(action)
        self.cursor += 1
        return StepResult(extract_features(self), outcome.score, self.done)


def learning_gate(awareness: float, config: SimConfig = SimConfig()) -> float:
    """Share of the nominal BC learning a student absorbs at a given strategy awareness."""
    return config.bc_learn_floor + (1.0 - config.bc_learn_floor) * awareness ** config.bc_learn_power


def nudge_compliance(strategy_awareness: float, config: SimConfig = SimConfig()) -> float:
    return float(np.clip(config.nudge_base + config.nudge_slope * strategy_awareness, 0.0, 1.0))


def initial_bc_knowledge(profile: StudentProfile, config: SimConfig = SimConfig()) -> float:
    return config.bc_prior + config.bc_prior_slope * profile.strategy_awareness


def extract_features(env: TutorEnv) -> np.ndarray:
    """152-dim state: 7 signals for each of 20 training slots (zero-padded) + 12 aggregates."""
    per_problem = np.zeros((N_TRAINING, SIGNALS_PER_PROBLEM))
    for i, outcome in enumerate(env.history):
        per_problem[i] = outcome.signals()
    h = env.history
    agg = np.zeros(N_AGGREGATES)
    agg[0] = env.cursor / N_TRAINING
    agg[1] = level_of(env.next_position) / 5.0 if not env.done else 0.0
    if h:
        sig = per_problem[: len(h)]
        agg[2] = sig[:, 0].mean()
        agg[3] = sig[:, 1].mean()
        agg[4] = sig[:, 2].mean()
        agg[5] = sig[:, 2].sum() / N_TRAINING
        agg[6] = sig[:, 3].mean()
        agg[7] = sig[:, 4].mean()
        agg[8] = sig[:, 6].mean()
        agg[9] = sig[-1, 6]
        first_switch = next((i + 1 for i, o in enumerate(h) if o.switched), 0)
        agg[10] = first_switch / N_TRAINING
        agg[11] = agg[9] - agg[8]
    out = np.concatenate([per_problem.ravel(), agg])
    assert out.shape == (DEFAULT_FEATURE_DIM,)
    return out


# --- tests outside training ------------------------------------------------------------


@dataclass(frozen=True)
class LogicTestResult:
    problems: tuple[ProblemOutcome, ...]

    @property
    def score(self) -> float:
        return float(np.mean([p.score for p in self.problems]))

    @property
    def iso_score(self) -> float:
        return float(np.mean([p.score for p in self.problems[:2]]))


def run_logic_pretest(profile: StudentProfile, rng, config: SimConfig = SimConfig()) -> LogicTestResult:
    """Two pre-test problems; strategy-aware students may switch to BC, early if time-aware."""
    k = initial_bc_knowledge(profile, config)
    aware = profile.strategy_awareness >= config.strategy_threshold
    out = []
    for _ in range(2):
        fc_time = _fc_time(profile, config.pretest_level, config, rng)
        switch_draw = rng.random()
        fraction = _switch_fraction(profile.time_awareness >= config.time_threshold, config, rng)
        p_switch = config.pretest_switch_prob[1] if aware else config.pretest_switch_prob[0]
        switch_at = fraction * fc_time if switch_draw < p_switch else None
        out.append(solve_problem(profile, profile.competence, k, config.pretest_level,
                                 switch_at, False, fc_time, config, rng))
    return LogicTestResult(tuple(out))


def run_logic_posttest(env: TutorEnv, rng) -> LogicTestResult:
    """Six post-test problems; the first two are isomorphic to the pre-test.

    Students reach for BC with probability equal to their BC knowledge and switch
    earlier the more they know.
    """
    cfg, profile = env.config, env.profile
    k = env.bc_knowledge
    out = []
    for i in range(6):
        level = cfg.pretest_level if i < 2 else cfg.posttest_level
        fc_time = _fc_time(profile, level, cfg, rng)
        use = rng.random() < k
        jitter = rng.uniform(0.0, 0.1)
        switch_at = (0.6 * (1.0 - k) + jitter) * fc_time if use else None
        out.append(solve_problem(profile, env.competence, k, level, switch_at, False, fc_time, cfg, rng))
    return LogicTestResult(tuple(out))


@dataclass(frozen=True)
class ProbabilityOutcome:
    pre: Score
    post: Score
    iso_post: Score


def run_probability_phase(profile: StudentProfile, bc_skill: float, rng,
                          config: SimConfig = SimConfig()) -> ProbabilityOutcome:
    """Probability tutor graded on accuracy only; post rises with the BC skill carried over."""
    if not 0.0 <= bc_skill <= 1.0:
        raise ValueError(f"bc_skill must be in [0, 1], got {bc_skill}")
    c = profile.competence
    sd = config.prob_noise
    pre_noise = rng.normal(0.0, 1.0, size=14) * sd
    post_noise = rng.normal(0.0, 1.0, size=20) * sd
    pre_acc = np.clip(config.prob_pre_base + config.prob_pre_slope * c + pre_noise, 0.0, 1.0)
    post_mean = config.prob_post_base + config.prob_post_slope * c + config.prob_transfer * bc_skill
    post_acc = np.clip(post_mean + post_noise, 0.0, 1.0)
    return ProbabilityOutcome(
        pre=Score(100.0 * float(pre_acc.mean())),
        post=Score(100.0 * float(post_acc.mean())),
        iso_post=Score(100.0 * float(post_acc[:14].mean())),
    )
