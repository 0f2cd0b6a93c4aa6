import json
import math

import numpy as np
import pytest

from metatutor.deepq import Policy, q_network
from metatutor.domain import InterventionAction, MetaGroup, derived_rng, is_last_in_level
from metatutor.harness import (
    CSV_COLUMNS,
    Condition,
    CorpusConfig,
    ExperimentConfig,
    Protocol,
    ResultRow,
    ResultsTable,
    action_distribution_report,
    assign_conditions,
    build_static_plan,
    decision_slots,
    generate_corpus,
    generate_labeled,
    incoming_features,
    load_nested_config,
    nested_config_to_dict,
    parse_csv_report,
    render_report,
    run_experiment,
)
from metatutor.sim import run_logic_pretest, sample_cohort
from metatutor.stats import Summary


def test_corpus_shape_and_masking():
    corpus = generate_corpus(12, seed=3)
    assert len(corpus.students) == 12 and len(corpus) == 240
    assert corpus.feature_dim == 152
    for r in corpus.records:
        assert r.problem_id == f"L-train-{r.position}"
        assert r.done == (r.position == 20)
        if is_last_in_level(r.position):
            assert r.action is InterventionAction.NoIntervention


def test_corpus_logging_policy_frequencies():
    corpus = generate_corpus(60, seed=1, config=CorpusConfig(logging_probs=(0.2, 0.3, 0.5)))
    free = [r.action for r in corpus.records if not is_last_in_level(r.position)]
    share = np.bincount([int(a) for a in free], minlength=3) / len(free)
    assert np.allclose(share, (0.2, 0.3, 0.5), atol=0.04)


def test_corpus_is_deterministic_across_workers():
    assert generate_corpus(6, seed=2).records == generate_corpus(6, seed=2, workers=2).records


def test_corpus_config_validation():
    with pytest.raises(ValueError):
        CorpusConfig(logging_probs=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        generate_corpus(0, seed=0)


def test_static_plan_rules():
    plan = build_static_plan()
    assert plan.action_at(7) is InterventionAction.DirectPresent
    assert plan.action_at(8) is InterventionAction.NoIntervention
    assert build_static_plan((), ()).direct_positions == frozenset()
    with pytest.raises(ValueError):
        build_static_plan((5,), (8,))
    with pytest.raises(ValueError):
        build_static_plan((5,), (5,))
    with pytest.raises(ValueError):
        build_static_plan((21,), ())
    assert len(decision_slots((5, 6))) == 13


def test_incoming_features_schema():
    pre = run_logic_pretest(sample_cohort(1, (0, 1, 0), seed=0)[0], derived_rng(0, "p"))
    f = incoming_features(pre)
    assert len(f) == 8 and all(math.isfinite(v) for v in f)
    assert len(generate_labeled(9, seed=1)) == 9


def test_assignment_is_stratified():
    ids = [f"s{i:02d}" for i in range(11)]
    groups = [MetaGroup.Default] * 6 + [MetaGroup.StrOnly] * 5
    cond = assign_conditions(ids, groups, 0.5, seed=4)
    exp = [sum(cond[s] is Condition.Experimental for s, g in zip(ids, groups) if g is grp)
           for grp in (MetaGroup.Default, MetaGroup.StrOnly)]
    assert exp == [3, 3]


def small_config(**kw):
    return ExperimentConfig(n_students=40, **kw)


def test_exp1_mask_discipline_and_strtime_untouched(group_forest):
    res = run_experiment("exp1", small_config(), group_forest, seed=5)
    for t in res.traces:
        for pos, a in enumerate(t.actions, start=1):
            if is_last_in_level(pos) or pos in t.we_positions:
                assert a == 0
        if t.predicted is MetaGroup.StrTime or t.condition is Condition.Control:
            assert not any(t.actions) and t.we_positions == ()
        else:
            assert t.we_positions == (5, 6)
    assert sum(r.n for r in res.rows) == 40
    assert set(res.labels) <= {"Default_Exp", "StrOnly_Exp", "Default_Ctrl", "StrOnly_Ctrl", "StrTime"}


def test_exp2_uses_policy_within_masks(group_forest):
    policy = Policy(q_network(152, np.random.default_rng(0)), np.zeros(152), np.ones(152))
    res = run_experiment("exp2", small_config(), group_forest, policy=policy, seed=5)
    for t in res.traces:
        for pos, a in enumerate(t.actions, start=1):
            if is_last_in_level(pos) or pos in t.we_positions:
                assert a == 0
    for r in res.rows:
        if r.actions is not None:
            assert sum(r.actions) == 13 * sum(
                1 for t in res.traces if t.row == r.label and t.condition is Condition.Experimental)


def test_experiment_is_deterministic_across_workers(group_forest):
    a = run_experiment("exp1", small_config(), group_forest, seed=9)
    b = run_experiment("exp1", small_config(), group_forest, seed=9, workers=2)
    assert render_report(a, "csv") == render_report(b, "csv")


def test_experiment_errors(group_forest):
    with pytest.raises(ValueError):
        run_experiment("exp2", small_config(), group_forest)
    with pytest.raises(ValueError):
        run_experiment("exp1", ExperimentConfig(n_students=1), group_forest)
    with pytest.raises(ValueError):
        run_experiment("exp3", small_config(), group_forest)


def test_action_report_examples():
    rep = action_distribution_report({"Default_Exp": (10, 20, 30), "StrOnly_Exp": (20, 40, 60)})
    assert rep.chi_square.chi2 == pytest.approx(0.0, abs=1e-12)
    one = action_distribution_report({"Default_Exp": (1, 2, 3)})
    assert one.chi_square is None and "one experimental group" in one.notice
    dropped = action_distribution_report({"a": (10, 0, 5), "b": (4, 0, 9)})
    assert dropped.chi_square.df == 1
    with pytest.raises(ValueError):
        action_distribution_report({"a": (0, 0, 0), "b": (0, 0, 0)})


def row(label, mean):
    cells = {(t, m): Summary(mean, 1.25, 3) for t in ("Logic", "Probability")
             for m in ("Pre", "IsoPost", "IsoNLG", "Post", "NLG")}
    return ResultRow(label, 3, cells, (1, 2, 3) if label.endswith("Exp") else None)


def test_render_empty_and_rounding():
    empty = ResultsTable(Protocol.Exp1Static, ())
    assert render_report(empty, "csv").decode() == ",".join(CSV_COLUMNS) + "\n"
    text = render_report(ResultsTable(Protocol.Exp1Static, (row("Default_Exp", 76.45),)), "text").decode()
    assert "76.5 (1.3)" in text and "76.45 (1.25)" in text
    with pytest.raises(ValueError):
        render_report(empty, "xml")


def test_csv_round_trip():
    table = ResultsTable(Protocol.Exp2Adaptive, (row("Default_Exp", 1 / 3), row("StrTime", 50.0)))
    back = parse_csv_report(render_report(table, "csv"), "exp2")
    assert back == table


def test_nested_config_round_trip(tmp_path):
    cfg = ExperimentConfig(n_students=30, sim={"prob_noise": 2.0})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(nested_config_to_dict(cfg)))
    assert load_nested_config(ExperimentConfig, path) == cfg
    assert load_nested_config(ExperimentConfig, None) == ExperimentConfig()
