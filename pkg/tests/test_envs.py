import json

import numpy as np
import pytest

from fairloop import envs
from fairloop.mdp import DomainError, LoadError


def test_lending_transition_rules():
    assert envs.lending_transition(5, 1, 1) == 6
    assert envs.lending_transition(5, 0, 1) == 5
    assert envs.lending_transition(5, 0, 0) == 5
    assert envs.lending_transition(5, 1, 0) == 4
    assert envs.lending_transition(10, 1, 1) == 10
    assert envs.lending_transition(1, 1, 0) == 1
    with pytest.raises(DomainError):
        envs.lending_transition(0, 1, 1)


def test_recidivism_transition_rules():
    assert envs.recidivism_transition(2, 3, 1, 0) == (2, 4)
    assert envs.recidivism_transition(2, 3, 0, 0) == (2, 3)
    assert envs.recidivism_transition(2, 3, 1, 1) == (2, 3)
    assert envs.recidivism_transition(2, 8, 1, 0) == (2, 8)
    with pytest.raises(DomainError):
        envs.recidivism_transition(6, 3, 1, 0)


def test_school_transition_rules():
    cards = (2, 3)
    young = ((0, 1), 0)
    moved = envs.school_transition(young, 0, cards, a=1, y=0)
    assert moved == ((1, 1), 1)
    old_done = ((1, 2), 1)
    assert envs.school_transition(old_done, 0, cards, a=0, y=0) == ((1, 2), 1)
    # label alone also latches the indicator
    assert envs.school_transition(young, 0, cards, a=0, y=1)[1] == 1
    with_scores = ((0, 1), 0, (100.0, 200.0, 300.0))
    out = envs.school_transition(with_scores, 0, cards, a=0, y=0)
    assert out[2] == (100.0, 200.0, 300.0)


def test_builtin_tables_load_with_documented_constants():
    lend = envs.load_env("lending")
    assert lend.feature_dim == 10 and lend.cost_c == 0.8
    assert np.allclose(lend.group_prior, [0.5, 0.5])
    rec = envs.load_env("recidivism")
    assert rec.feature_dim == 13 and rec.cost_c == 0.9
    school = envs.load_env("school")
    assert school.feature_dim == 127 and school.cost_c == 0.5
    assert np.allclose(sorted(school.group_prior), [0.38, 0.62])
    cont = envs.load_env("school_continuous")
    assert cont.feature_dim == 130 and cont.cost_c == 0.5


def test_lending_alpha_monotone_in_score():
    env = envs.load_env("lending")
    for z in range(2):
        alphas = [env.alpha_of((s,), z) for s in range(1, 11)]
        assert all(b >= a for a, b in zip(alphas, alphas[1:]))


def test_school_base_rate_near_documented_value():
    env = envs.load_env("school")
    rate = 0.0
    for z in range(2):
        a = np.array([env.alpha_of(p, z) for p in env.support[z]])
        rate += env.group_prior[z] * float(env.init_probs[z] @ a)
    assert rate == pytest.approx(0.37, abs=0.02)


def test_school_indicator_boost_half_probability_at_mean_point():
    raw = envs.load_raw("school")
    env = envs.build_env(raw)
    w, b = env.alpha_logistic
    # dataset-mean encoded point (indicator off) mixed over groups
    mean_x = np.zeros(env.feature_dim)
    mean_z = 0.0
    for z in range(2):
        enc = np.stack([env.encode_fn(p) for p in env.support[z]])
        mean_x += env.group_prior[z] * env.init_probs[z] @ enc
        mean_z += env.group_prior[z] * z
    logit = mean_x @ w[:-1] + mean_z * w[-1] + b
    base = 1 / (1 + np.exp(-logit))
    indicator_dim = 126
    boosted_logit = logit + w[indicator_dim] - mean_x[indicator_dim] * w[indicator_dim]
    boosted = 1 / (1 + np.exp(-boosted_logit))
    assert boosted - base == pytest.approx(0.5, abs=1e-6)


def test_school_age_weight_reduces_qualification():
    raw = envs.load_raw("school")
    env = envs.build_env(raw)
    w, _ = env.alpha_logistic
    age_index = raw["age_index"]
    offset = int(np.sum(raw["cardinalities"][:age_index]))
    assert w[offset + 1] < w[offset]


def test_bad_probability_row_is_named(tmp_path):
    raw = envs.export_env("lending")
    raw["init_probs"][1][0] += 0.1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(LoadError, match="row 1"):
        envs.load_env(str(path))


def test_alpha_out_of_range_rejected(tmp_path):
    raw = envs.export_env("lending")
    raw["alpha"]["values"][0][3] = 1.7
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(LoadError):
        envs.load_env(str(path))


def test_missing_file_is_load_error():
    with pytest.raises(LoadError):
        envs.load_env("/nonexistent/table.json")


def test_export_round_trip(tmp_path):
    for name in envs.BUILTIN:
        table = envs.export_env(name)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(table))
        again = envs.export_env(str(path))
        assert again == table


def test_transitions_closed_over_domain():
    env = envs.load_env("recidivism")
    for z in range(2):
        for point in env.support[z]:
            for a in (0, 1):
                for y in (0, 1):
                    nxt = env.transition_fn(point, z, a, y)
                    env.check_fn(nxt, z)
    lend = envs.load_env("lending")
    for s in range(1, 11):
        for a in (0, 1):
            for y in (0, 1):
                lend.check_fn(lend.transition_fn((s,), 0, a, y), 0)


def test_shipped_tables_validate_against_documented_schema():
    import jsonschema

    schema = json.loads(open("docs/env_table_schema.json").read())
    for name in envs.BUILTIN:
        jsonschema.validate(envs.load_raw(name), schema)


def test_school_continuous_keeps_dynamics_and_scores():
    env = envs.load_env("school_continuous")
    point = env.support[0][0]
    assert len(point) == 3 and len(point[2]) == 3
    nxt = env.transition_fn(point, 0, 1, 0)
    assert nxt[2] == point[2] and nxt[1] == 1
    enc = env.encode_fn(point)
    assert enc.shape == (130,)
    assert (enc[-3:] >= 0).all() and (enc[-3:] <= 1).all()
