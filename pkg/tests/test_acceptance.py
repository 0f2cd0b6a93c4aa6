"""Acceptance criteria 1-12; the terminal summary prints one PASS/FAIL line per criterion."""

import json
import math
import time

import numpy as np
import pytest

from metatutor.cli import main
from metatutor.deepq import Mlp, Policy, TrainConfig, ddqn_target, grad_check, train
from metatutor.domain import InterventionAction, MetaGroup, ReplayCorpus, TransitionRecord, is_last_in_level
from metatutor.forest import ForestConfig, accuracy, oob_accuracy, train_forest
from metatutor.harness import Condition, ExperimentConfig, generate_corpus, generate_labeled, run_experiment
from metatutor.sim import fit_switch_distribution, sample_switch_time
from metatutor.stats import Summary, bonferroni, cohens_d, nlg

criterion = pytest.mark.criterion


@criterion(1, "chi-square reproduction")
def test_chi_square_reproduction(tmp_path, capsys):
    table = tmp_path / "actions.json"
    table.write_text("[[94, 65, 127], [82, 74, 156]]")
    start = time.perf_counter()
    code = main(["stats", "--test", "chi2", "--in", str(table)])
    elapsed = time.perf_counter() - start
    out = json.loads(capsys.readouterr().out)
    assert code == 0
    assert 3.20 <= out["chi2"] <= 3.30 and out["df"] == 2 and 0.19 <= out["p"] <= 0.21
    assert out["n"] == 598
    assert elapsed < 0.010


@criterion(2, "effect-size reproduction")
@pytest.mark.parametrize("a,b,expected,tol", [
    ((87.7, 5, 22), (80.2, 11, 22), 0.88, 0.01),
    ((87.7, 5, 22), (70, 15, 22), 1.58, 0.02),
    ((94.1, 6, 22), (87.7, 8, 22), 0.905, 0.01),
    ((94.1, 6, 22), (71.8, 11, 22), 2.52, 0.03),
    ((87.6, 5, 24), (80.5, 9, 25), 0.97, 0.02),
])
def test_effect_sizes(a, b, expected, tol):
    assert abs(cohens_d(Summary(*a), Summary(*b)) - expected) <= tol


@criterion(3, "Bonferroni exactness")
def test_bonferroni_exactness():
    assert abs(bonferroni(0.05, 10) - 0.005) <= 1e-9
    assert abs(bonferroni(0.05, 6) - 0.008333) <= 1e-6
    assert abs(bonferroni(0.05, 6) - 0.05 / 6) <= 1e-15


def _constant(q):
    net = Mlp((1, 3))
    net.biases[0][:] = q
    return net


def _naive_target(record, successor, main_net, target_net, gamma, mask=None):
    # max over the target network: couples selection and evaluation
    return record.reward + gamma * float(np.max(target_net.biases[0]))


def _passes_decoupling(target_fn):
    rec = TransitionRecord("s", "p", 1, (0.0,), 0, 10.0, False)
    return target_fn(rec, np.zeros(1), _constant([1, 3, 2]), _constant([5, 0, 7]), 0.9) == 10.0


@criterion(4, "DDQN decoupling")
def test_ddqn_decoupling():
    assert _passes_decoupling(ddqn_target)
    rec = TransitionRecord("s", "p", 1, (0.0,), 0, 10.0, False)
    assert _naive_target(rec, None, None, _constant([5, 0, 7]), 0.9) == pytest.approx(16.3)
    assert not _passes_decoupling(_naive_target)


@criterion(5, "gradient correctness")
def test_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for k in range(25):
        rng = np.random.default_rng(1000 + k)
        net = Mlp.init((152, 16, 16, 3), rng)
        # keep pre-activations off the rectifier kink
        for b in net.biases:
            b[:] = rng.uniform(0.05, 0.5, size=b.shape) * rng.choice([-1, 1], size=b.shape)
        batch = int(rng.integers(1, 9))
        x = rng.normal(size=(batch, 152))
        # unit-scale targets; a large loss swamps tiny gradient entries in finite-difference roundoff
        worst = max(worst, grad_check(net, x, rng.integers(0, 3, size=batch), rng.normal(size=batch)))
    assert worst <= 1e-4
    assert time.perf_counter() - start < 30


# two states, two actions; action 1 ends the episode
TOY = {(0, 0): (1.0, 1), (0, 1): (2.0, None), (1, 0): (0.0, 0), (1, 1): (3.0, None)}
# value iteration at gamma 0.9: Q*(0,0) = 1 + 0.9 * Q*(1,0), Q*(1,0) = 0.9 * Q*(0,0)
Q_STAR = np.array([[1 / 0.19, 2.0], [0.9 / 0.19, 3.0]])


def _toy_corpus(n_records=5000, seed=0):
    rng = np.random.default_rng(seed)
    records, episode = [], 0
    while len(records) < n_records:
        state, position = int(rng.integers(2)), 1
        while True:
            action = int(rng.integers(2))
            reward, nxt = TOY[state, action]
            records.append(TransitionRecord(f"e{episode}", f"p{position}", position, tuple(np.eye(2)[state]),
                                            action, reward, nxt is None))
            if nxt is None:
                break
            state, position = nxt, position + 1
        episode += 1
    return ReplayCorpus.from_records(records)


@criterion(6, "toy-MDP convergence")
def test_toy_mdp_convergence():
    start = time.perf_counter()
    corpus = _toy_corpus()
    assert len(corpus) >= 5000
    result = train(corpus, TrainConfig(), successor_mask=lambda position: (True, True, False))
    q = result.policy.q_values(np.eye(2))[:, :2]
    assert np.abs(q - Q_STAR).max() <= 1e-2
    assert time.perf_counter() - start < 60


@criterion(7, "mask discipline")
def test_mask_discipline(group_forest):
    # raw Q values always favour direct presentation, so only the masks can block it
    net = Mlp((152, 3))
    net.biases[0][:] = (0.0, 1.0, 2.0)
    eager = Policy(net, np.zeros(152), np.ones(152))
    exp2 = run_experiment("exp2", ExperimentConfig(n_students=110), group_forest, policy=eager, seed=0)
    assert len(exp2.traces) == 110
    for t in exp2.traces:
        for position, action in enumerate(t.actions, start=1):
            if is_last_in_level(position) or position in t.we_positions:
                assert action == InterventionAction.NoIntervention
    assert any(t.condition is Condition.Experimental and any(t.actions) for t in exp2.traces)
    exp1 = run_experiment("exp1", ExperimentConfig(n_students=110), group_forest, seed=0)
    strtime = [t for t in exp1.traces if t.predicted is MetaGroup.StrTime]
    assert strtime and all(not any(t.actions) and not t.we_positions for t in strtime)


@criterion(8, "forest quality")
def test_forest_quality():
    data = generate_labeled(300, seed=21)
    order = np.random.default_rng(0).permutation(len(data))
    held = [data[i] for i in order[:60]]
    fit = [data[i] for i in order[60:]]
    forest = train_forest(fit, ForestConfig(), seed=3)
    held_acc = accuracy(forest, held)
    assert held_acc >= 0.90
    assert abs(oob_accuracy(forest, fit) - held_acc) <= 0.05


@criterion(9, "NLG properties")
def test_nlg_properties():
    rng = np.random.default_rng(9)
    for m in (1.0, 4.0, 100.0):
        assert nlg(0.3 * m, 0.3 * m, m) == 0.0
        assert nlg(0.0, m, m) == pytest.approx(math.sqrt(m))
    assert nlg(0.0, 1.0, 1.0) == 1.0
    for _ in range(1000):
        m = float(rng.uniform(0.5, 100))
        pre = float(rng.uniform(0, 0.99 * m))
        lo, hi = np.sort(rng.uniform(0, m, size=2))
        if hi > lo:
            assert nlg(pre, float(lo), m) < nlg(pre, float(hi), m)
    assert abs(nlg(0.556, 0.877, 1.0) - 0.4817) <= 1e-4


@criterion(10, "sampler fidelity")
def test_sampler_fidelity():
    source = [20.0, 10.0, 30.0]
    dist = fit_switch_distribution(source)
    rng = np.random.default_rng(10)
    draws = np.array([sample_switch_time(dist, rng) for _ in range(10_000)])
    assert abs(draws.mean() - np.mean(source)) <= 0.05 * np.mean(source)
    assert draws.min() >= 10.0 and draws.max() <= 30.0


def _cli(*argv):
    assert main([str(a) for a in argv]) == 0


@criterion(11, "determinism")
def test_cli_determinism(tmp_path, capsys):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 3, "seed": 5}))
    outputs = {}
    for run, workers in (("a", 1), ("b", 1), ("c", 3)):
        d = tmp_path / run
        d.mkdir()
        _cli("gen-corpus", "--students", 25, "--seed", 4, "--out", d / "corpus.jsonl", "--workers", workers)
        _cli("train-policy", "--corpus", d / "corpus.jsonl", "--config", cfg, "--out", d / "policy.json")
        _cli("gen-labeled", "--students", 90, "--seed", 4, "--out", d / "labeled.jsonl", "--workers", workers)
        _cli("train-rfc", "--corpus", d / "labeled.jsonl", "--seed", 4, "--out", d / "forest.json",
             "--workers", workers)
        for protocol in ("exp1", "exp2"):
            for fmt in ("text", "csv"):
                _cli("run-exp", "--protocol", protocol, "--forest", d / "forest.json", "--policy", d / "policy.json",
                     "--seed", 4, "--format", fmt, "--out", d / f"{protocol}.{fmt}", "--workers", workers)
        outputs[run] = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
    capsys.readouterr()
    assert len(outputs["a"]) == 8
    assert outputs["a"] == outputs["b"] == outputs["c"]


def _gain(results, group, tutor, metric):
    exp = results.row(f"{group}_Exp").summary(tutor, metric).mean
    ctrl = results.row(f"{group}_Ctrl").summary(tutor, metric).mean
    return exp - ctrl


@criterion(12, "end-to-end qualitative echo")
def test_end_to_end_echo():
    start = time.perf_counter()
    seed = 0
    corpus = generate_corpus(400, seed)
    policy = train(corpus, TrainConfig(epochs=100, seed=seed)).policy
    forest = train_forest(generate_labeled(600, seed), seed=seed)
    exp2 = run_experiment("exp2", ExperimentConfig(), forest, policy=policy, seed=seed)
    for group in ("Default", "StrOnly"):
        assert _gain(exp2, group, "Logic", "NLG") > 0
        assert _gain(exp2, group, "Probability", "Post") > 0
    exp1 = run_experiment("exp1", ExperimentConfig(), forest, seed=seed)
    for tutor, metric in (("Logic", "NLG"), ("Probability", "Post")):
        assert _gain(exp1, "StrOnly", tutor, metric) > _gain(exp1, "Default", tutor, metric)
    assert time.perf_counter() - start < 120
