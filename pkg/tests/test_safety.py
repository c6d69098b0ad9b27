from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_world, three_in_a_row
from safeplan.risk import RiskLabel, probe_risk
from safeplan.safety import (
    SafetyMatrix,
    TrainingError,
    TrajectoryRecord,
    collect_dataset,
    default_model_path,
    encoder_digest,
    forward,
    init_params,
    load_dataset,
    load_model,
    loss_and_grads,
    matrix_to_ranking,
    oracle_matrix,
    predict_matrix,
    records_for_world,
    save_dataset,
    save_model,
    stack_records,
    train,
)
from safeplan.world import SKILLS, SceneConfig, generate_scene, render_views


@pytest.fixture(scope="module")
def small_records():
    return collect_dataset(SceneConfig(mode="hard", object_count=5, seed=0), 4, seed=3)


def zero_heads(params):
    params.head_w[...] = 0.0
    params.head_b[...] = 0.0
    return params


# --- forward --------------------------------------------------------------


def test_forward_with_zero_heads_is_zero():
    params = zero_heads(init_params())
    views = render_views(three_in_a_row(), "middle")
    assert forward(params, views, 0) == 0.0


def test_forward_rejects_bad_index_and_shape():
    params = init_params()
    with pytest.raises(ValueError):
        forward(params, np.zeros((5, 32)), 3)
    with pytest.raises(ValueError):
        forward(params, np.zeros((4, 32)), 0)


def test_forward_deterministic():
    params = init_params(seed=5)
    views = render_views(three_in_a_row(), "left")
    assert forward(params, views, 1) == forward(params.copy(), views.copy(), 1)


# --- gradients ------------------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def test_gradient_check(small_records):
    # spot check of 200 coordinates per array; the exhaustive check is an acceptance test
    eps = 1e-5
    views, idx, labels = stack_records(small_records[:10])
    rng = np.random.default_rng(0)
    worst = 0.0
    for point in range(5):
        params = init_params(seed=100 + point, head_scale=0.3)
        _, grads = loss_and_grads(params, views, idx, labels)
        for name, full in grads.items():
            arr = getattr(params, name)
            picks = rng.choice(arr.size, size=min(200, arr.size), replace=False)
            coords = [np.unravel_index(p, arr.shape) for p in picks]
            g = np.array([full[k] for k in coords])
            numeric = np.zeros(len(coords))
            for j, k in enumerate(coords):
                keep = arr[k]
                arr[k] = keep + eps
                up, _ = loss_and_grads(params, views, idx, labels)
                arr[k] = keep - eps
                down, _ = loss_and_grads(params, views, idx, labels)
                arr[k] = keep
                numeric[j] = (up - down) / (2 * eps)
            worst = max(worst, relative_error(g, numeric))
    assert worst <= 1e-4


# --- training -------------------------------------------------------------


def test_single_record_memorization_floor(small_records):
    rec = [r for r in small_records if r.target > 0][0]
    result = train(init_params(), [rec], max_epochs=200)
    assert result.final_loss < 1e-4


def test_training_keeps_encoder_frozen(small_records):
    params = init_params()
    digest = encoder_digest(params)
    result = train(params, small_records, max_epochs=2)
    assert encoder_digest(result.params) == digest == encoder_digest(params)
    assert not np.array_equal(result.params.w_in, params.w_in)


def test_training_deterministic(small_records):
    a = train(init_params(seed=1), small_records, max_epochs=3, seed=9)
    b = train(init_params(seed=1), small_records, max_epochs=3, seed=9)
    for name in ("encoder",) + a.params.TRAINABLE:
        assert np.array_equal(getattr(a.params, name), getattr(b.params, name))
    assert a.losses == b.losses


def test_training_lowers_loss(small_records):
    result = train(init_params(), small_records, max_epochs=30)
    assert result.losses[-1] < result.losses[0]


def test_training_errors():
    with pytest.raises(TrainingError, match="empty"):
        train(init_params(), [])
    bad = TrajectoryRecord("x", 0, "o", np.zeros((5, 32)), RiskLabel(0, "o", math.inf))
    with pytest.raises(TrainingError, match="non-finite"):
        train(init_params(), [bad])
    rec = TrajectoryRecord("x", 0, "o", np.ones((5, 32)), RiskLabel(0, "o", 1.0))
    with pytest.raises(TrainingError, match="diverged"), np.errstate(over="ignore", invalid="ignore"):
        train(init_params(), [rec], lr=1e300, max_epochs=3)


# --- dataset --------------------------------------------------------------


def test_records_cover_every_applicable_pair():
    w = three_in_a_row()
    recs = records_for_world(w, "s", SKILLS)
    # pick and navigate on the fresh scene, place from a post-pick clone
    assert len(recs) == 3 * len(SKILLS)
    for r in recs:
        skill = SKILLS[r.skill_index]
        if skill == "place":
            assert r.scene_ref == f"s+pick:{r.object}"
        else:
            assert r.scene_ref == "s"
            assert r.target == probe_risk(w, skill, r.object)
    middle_pick = [r for r in recs if r.object == "middle" and SKILLS[r.skill_index] == "pick"][0]
    assert middle_pick.target == 2.0


def test_collect_dataset_deterministic_and_capped():
    tmpl = SceneConfig(mode="easy", object_count=3, seed=0)
    a = collect_dataset(tmpl, 3, seed=1)
    b = collect_dataset(tmpl, 3, seed=1)
    assert [(r.scene_ref, r.object, r.target) for r in a] == [(r.scene_ref, r.object, r.target) for r in b]
    assert len(collect_dataset(tmpl, 3, seed=1, max_records=5)) == 5
    with pytest.raises(ValueError):
        collect_dataset(tmpl, 0, seed=1)


def test_dataset_round_trip(tmp_path, small_records):
    path = tmp_path / "ds.txt"
    save_dataset(path, small_records[:7])
    save_dataset(path, small_records[7:12])  # append keeps one header
    skills, loaded = load_dataset(path)
    assert skills == SKILLS
    assert path.read_text().count("SKILLS=") == 1
    assert len(loaded) == 12
    for a, b in zip(small_records[:12], loaded):
        assert (a.scene_ref, a.skill_index, a.object) == (b.scene_ref, b.skill_index, b.object)
        assert b.target == pytest.approx(a.target, rel=1e-6)
        assert np.allclose(a.views, b.views, rtol=1e-6, atol=0)


def test_dataset_format_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("I=3 VIEWDIM=16 VIEWS=5 SKILLS=pick,place,navigate\n")
    with pytest.raises(ValueError, match="header"):
        load_dataset(path)
    path.write_text("I=3 VIEWDIM=32 VIEWS=5 SKILLS=pick,place,navigate\nep0 0 apple 1.0 0.0\n")
    with pytest.raises(ValueError, match=":2:"):
        load_dataset(path)
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_dataset(path)


# --- model files ----------------------------------------------------------


def test_model_round_trip_is_exact(tmp_path):
    params = init_params(seed=4)
    save_model(tmp_path / "m.txt", params)
    loaded = load_model(tmp_path / "m.txt")
    assert loaded.skills == params.skills
    for name in ("encoder",) + params.TRAINABLE:
        assert np.array_equal(getattr(loaded, name), getattr(params, name))


def test_model_file_validation(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("not a model\n")
    with pytest.raises(ValueError, match="not a"):
        load_model(path)
    save_model(path, init_params())
    lines = path.read_text().splitlines()
    lines[2] = "encoder 32 8"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="shape"):
        load_model(path)
    save_model(path, init_params())
    path.write_text("\n".join(path.read_text().splitlines()[:-2]) + "\n")
    with pytest.raises(ValueError, match="missing"):
        load_model(path)


def test_shipped_model_loads():
    params = load_model(default_model_path())
    assert params.skills == SKILLS
    assert encoder_digest(params) == encoder_digest(init_params())


# --- inference ------------------------------------------------------------


def test_empty_matrix():
    m = predict_matrix(init_params(), make_world(), SKILLS, [])
    assert m.entries.shape == (3, 0)
    assert matrix_to_ranking(m).text == ""


def test_matrix_shape_and_sentinel():
    w = three_in_a_row()
    names = ["left", "middle", "right"]
    m = predict_matrix(init_params(), w, SKILLS, names)
    assert m.entries.shape == (3, 3)
    assert np.isinf(m.entries[SKILLS.index("place")]).all()
    assert (m.entries[np.isfinite(m.entries)] >= 0).all()


def test_learned_signal_middle_is_riskier():
    w = three_in_a_row()
    m = predict_matrix(load_model(default_model_path()), w, SKILLS, ["left", "middle", "right"])
    assert m.value("pick", "middle") > m.value("pick", "left")
    assert m.value("pick", "middle") > m.value("pick", "right")


def test_oracle_matrix_three_in_a_row():
    m = oracle_matrix(three_in_a_row(), ("pick",), ["left", "middle", "right"])
    assert m.entries.tolist() == [[1.0, 2.0, 1.0]]
    assert m.source == "oracle"


# --- ranking --------------------------------------------------------------


def matrix(values: dict[str, float], skills=("pick",)) -> SafetyMatrix:
    objs = tuple(values)
    return SafetyMatrix(np.array([[values[o] for o in objs]] * len(skills)), tuple(skills), objs)


def test_ranking_example():
    r = matrix_to_ranking(matrix({"bowl": 0.2, "apple": 0.7}))
    assert r.text == "The safest operator is to pick the bowl. The second safest operator is to pick the apple."


def test_ranking_ties_are_lexicographic():
    r = matrix_to_ranking(matrix({"bowl": 0.5, "apple": 0.5}))
    assert r.text.startswith("The safest operator is to pick the apple.")


def test_ranking_skips_inapplicable():
    r = matrix_to_ranking(matrix({"bowl": math.inf, "apple": 0.1}))
    assert r.text == "The safest operator is to pick the apple."
    assert r.order[-1] == ("pick", "bowl", 1)


def test_ranking_ordinals_past_tenth():
    r = matrix_to_ranking(matrix({f"o{k:02d}": float(k) for k in range(12)}))
    assert "The tenth safest operator is to pick the o09." in r.text
    assert "The 11-th safest operator is to pick the o10." in r.text


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=6), st.sampled_from([np.exp, np.sqrt, lambda x: 3 * x + 1]))
def test_ranking_invariant_under_monotone_maps(values, fn):
    m = matrix({f"o{k}": v for k, v in enumerate(values)}, skills=("pick", "navigate"))
    mapped = SafetyMatrix(fn(m.entries), m.skills, m.objects)
    # strictly increasing maps preserve ties only when distinct values stay distinct
    if len(set(fn(np.array(values)).tolist())) == len(set(values)):
        assert matrix_to_ranking(mapped) == matrix_to_ranking(m)


def test_ranking_deterministic():
    w = generate_scene(SceneConfig(mode="hard", object_count=6, seed=2))
    names = [o.name for o in w.objects]
    m = oracle_matrix(w, SKILLS, names)
    assert matrix_to_ranking(m) == matrix_to_ranking(oracle_matrix(w, SKILLS, names))


# --- worked examples ------------------------------------------------------------


def test_one_easy_episode_pick_only_gives_three_records():
    recs = collect_dataset(SceneConfig(mode="easy", object_count=3, seed=0), 1, seed=0, skills=("pick",))
    assert len(recs) == 3


def test_labels_match_oracle_matrix():
    from safeplan.risk import oracle_risk_matrix

    w = generate_scene(SceneConfig(mode="hard", object_count=6, seed=8))
    names = sorted(o.name for o in w.objects)
    m = oracle_risk_matrix(w, SKILLS, names)
    for r in records_for_world(w, "s", SKILLS):
        if SKILLS[r.skill_index] != "place":
            assert r.target == m[r.skill_index, names.index(r.object)]


def test_hundred_hard_episodes_deterministic():
    tmpl = SceneConfig(mode="hard", object_count=5, seed=0)
    a = collect_dataset(tmpl, 100, seed=42)
    b = collect_dataset(tmpl, 100, seed=42)
    assert len(a) == len(b) > 0
    for x, y in zip(a, b):
        assert (x.scene_ref, x.skill_index, x.object, x.target) == (y.scene_ref, y.skill_index, y.object, y.target)
        assert np.array_equal(x.views, y.views)


def test_isolated_object_predicted_near_zero():
    params = load_model(default_model_path())
    for i in range(len(SKILLS)):
        assert abs(forward(params, np.zeros((5, 32)), i)) <= 0.5
