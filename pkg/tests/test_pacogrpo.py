import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacolab import flowgen as fg
from pacolab import pacogrpo as pg
from pacolab import toyworld as tw
from pacolab.numcore import RngStream

finite = st.floats(-3, 3, allow_nan=False)


def test_cv_examples():
    assert pg.coefficient_of_variation([1.0, 2.0, 3.0]) == pytest.approx(np.sqrt(2 / 3) / 2)
    assert pg.coefficient_of_variation([0.5, 0.5]) == 0.0
    with pytest.raises(pg.ZeroMeanError, match="zero-mean"):
        pg.coefficient_of_variation([-1.0, 1.0])


def test_shift_only_when_mean_not_positive():
    v, s = pg.shift_for_cv([-1.0, 1.0])
    assert s == 0.5 and list(v) == [-0.5, 1.5]
    v, s = pg.shift_for_cv([0.2, 0.4])
    assert s == 0.0 and list(v) == [0.2, 0.4]


def test_log_tame_examples():
    e1 = np.e - 1.0
    np.testing.assert_allclose(pg.log_tame([e1, 0.0], 0.3, 0.2), [1.0, 0.0])
    np.testing.assert_array_equal(pg.log_tame([e1, 0.0], 0.2, 0.2), [e1, 0.0])
    with pytest.raises(ValueError):
        pg.log_tame([-1.5], 1.0, 0.2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=10))
def test_log_tame_is_monotone_and_compressing(vals):
    out = pg.log_tame(vals, 1.0, 0.2)
    order = np.argsort(vals, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    assert np.all(out <= np.asarray(vals) + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(2, 5), st.integers(0, 1000))
def test_aggregate_matches_loop(K, N, G, seed):
    rng = np.random.default_rng(seed)
    tamed, w = rng.normal(size=(K, N, G)), rng.normal(size=K)
    want = np.zeros((N, G))
    for k in range(K):
        for i in range(N):
            for j in range(G):
                want[i, j] += w[k] * tamed[k, i, j]
    np.testing.assert_allclose(pg.aggregate(tamed, w), want, atol=1e-12)
    with pytest.raises(ValueError):
        pg.aggregate(tamed, np.ones(K + 1))


def test_advantages_examples():
    np.testing.assert_allclose(pg.advantages([[1.0, 2.0, 3.0]]), [[-np.sqrt(1.5), 0.0, np.sqrt(1.5)]])
    np.testing.assert_array_equal(pg.advantages([[0.7, 0.7, 0.7], [1.0, 1.0, 1.0 + 1e-12]]), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        pg.advantages([[1.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=3, max_size=8), st.floats(0.1, 5), finite)
def test_advantages_standardised_and_affine_invariant(row, scale, shift):
    r = np.asarray([row])
    a = pg.advantages(r)
    if r.std() >= 1e-6:
        assert a.mean() == pytest.approx(0.0, abs=1e-9)
        assert a.std() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(pg.advantages(scale * r + shift), a, atol=1e-6)


def test_build_panel_flags_and_dynamic_delta():
    raw = np.array([[[0.1, 0.9, 0.5, 0.2]], [[0.80, 0.82, 0.81, 0.79]]])
    p = pg.build_panel(raw, ["consistency", "alignment"], [1.0, 1.0], 0.2)
    assert list(p.tamed_flags) == [True, False]
    np.testing.assert_allclose(p.tamed[0], np.log1p(raw[0]))
    np.testing.assert_array_equal(p.tamed[1], raw[1])
    d = pg.build_panel(raw, ["c", "a"], [1.0, 1.0], "dynamic-mean")
    assert d.delta == pytest.approx(d.cv.mean())
    off = pg.build_panel(raw, ["c", "a"], [1.0, 1.0], 0.2, tame=False)
    assert not off.tamed_flags.any()
    np.testing.assert_array_equal(off.aggregated, raw.sum(axis=0))


def test_clipped_objective_hand_case():
    old = np.zeros((2, 1))
    new = np.log(np.array([[1.5], [1.5]]))
    assert pg.clipped_objective(new, old, [1.0, -1.0], 0.2) == pytest.approx((1.2 - 1.5) / 2)
    assert pg.clipped_objective(old, old, [0.5, -0.1], 0.2) == pytest.approx(0.2)
    g = pg.clipped_objective_grad(new, old, [1.0, -1.0], 0.2)
    assert g[0, 0] == 0.0 and g[1, 0] == pytest.approx(-1.5 / 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_clipped_objective_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    old = rng.normal(size=(4, 3))
    new = old + rng.normal(scale=0.3, size=(4, 3))
    adv = rng.normal(size=4)
    eps, h = 0.2, 1e-6
    g = pg.clipped_objective_grad(new, old, adv, eps)
    for idx in np.ndindex(new.shape):
        r = np.exp(new[idx] - old[idx])
        if abs(r - (1 + eps)) < 1e-3 or abs(r - (1 - eps)) < 1e-3:
            continue  # kink
        up, dn = new.copy(), new.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (pg.clipped_objective(up, old, adv, eps) - pg.clipped_objective(dn, old, adv, eps)) / (2 * h)
        assert g[idx] == pytest.approx(fd, abs=1e-7)


def test_nonfinite_ratio_raises():
    with pytest.raises(pg.NonFiniteRatioError):
        pg.clipped_objective(np.array([[1000.0]]), np.array([[0.0]]), [1.0], 0.2)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=6), st.lists(finite, min_size=1, max_size=6))
def test_kl_nonnegative_and_zero_at_reference(a, b):
    n = min(len(a), len(b))
    new, ref = np.asarray(a[:n]), np.asarray(b[:n])
    assert pg.kl_penalty(new, ref) >= -1e-12
    assert pg.kl_penalty(new, new) == 0.0


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    new, ref = rng.normal(size=6), rng.normal(size=6)
    g = pg.kl_penalty_grad(new, ref)
    for i in range(6):
        up, dn = new.copy(), new.copy()
        up[i] += 1e-6
        dn[i] -= 1e-6
        assert g[i] == pytest.approx((pg.kl_penalty(up, ref) - pg.kl_penalty(dn, ref)) / 2e-6, abs=1e-8)


def history(pairs):
    return [{"channel_mean": {"consistency": c, "alignment": a}} for c, a in pairs]


def test_dominance_ratio_examples():
    r = pg.dominance_ratio(history([(0.3, 0.8), (0.5, 0.9)]))
    assert r[0] == 0.0 and r[1] == pytest.approx(2.0)
    r = pg.dominance_ratio(history([(0.3, 0.8), (0.4, 0.7)]))
    assert r[1] == pytest.approx(0.1 / 1e-3)
    assert pg.dominance_ratio([]) == []
    with pytest.raises(ValueError, match="exactly the channels"):
        pg.dominance_ratio([{"channel_mean": {"consistency": 0.1}}])


def test_channel_error_wraps_name():
    def broken(samples, prompts):
        raise KeyError("boom")
    ch = pg.RewardChannel("mystery", broken)
    with pytest.raises(pg.RewardChannelError, match="'mystery'"):
        ch(np.zeros((1, 2, 32)), [None])
    bad = pg.RewardChannel("shape", lambda s, p: np.zeros(3))
    with pytest.raises(pg.RewardChannelError, match="shape"):
        bad(np.zeros((1, 2, 32)), [None])


def test_channels_agree_with_toyworld():
    s = RngStream(2)
    p = tw.random_prompt(s)
    xs = [tw.render(p, i, 0.3, s.split(i), 64) for i in range(p.n_contents)]
    samples = np.stack([x.samples for x in xs])[None]
    c = pg.analytic_consistency_channel()(samples, [p])[0]
    assert c == pytest.approx(tw.consistency_reward_set(xs), abs=1e-12)
    a = pg.alignment_channel()(samples, [p])[0]
    assert a == pytest.approx(np.mean([tw.alignment_reward(x, p, i) for i, x in enumerate(xs)]), abs=1e-12)
    with pytest.raises(pg.RewardChannelError, match="alignment"):
        pg.alignment_channel()(samples[..., ::4], [p])


def test_config_validation():
    with pytest.raises(ValueError):
        pg.GrpoConfig(group_size=1)
    with pytest.raises(ValueError):
        pg.GrpoConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        pg.GrpoConfig(delta="median")
    assert pg.GrpoConfig(sde_steps=[1, 2]).to_json()["sde_steps"] == [1, 2]


SMALL = pg.GrpoConfig(group_size=4, conditions_per_epoch=2, n_steps=4, epochs=2, clip_eps=0.2, lr=1e-3)


@pytest.fixture(scope="module")
def small_policy():
    return fg.init_flow_model(RngStream(0), hidden=(16,))


@pytest.fixture(scope="module")
def pool():
    s = RngStream(9)
    return [tw.random_prompt(s.split(i)) for i in range(6)]


CHANNELS = [pg.analytic_consistency_channel(), pg.alignment_channel()]


def test_zero_noise_leaves_params_unchanged(small_policy, pool):
    state = pg.GrpoState.start(small_policy)
    pg.grpo_epoch(state, pool, CHANNELS, [1.0, 1.0], replace(SMALL, noise_a=0.0), RngStream(1))
    for k, v in small_policy.params.items():
        np.testing.assert_array_equal(state.policy.params[k], v)


def test_epoch_updates_params_and_reports(small_policy, pool):
    state = pg.GrpoState.start(small_policy)
    rep = pg.grpo_epoch(state, pool, CHANNELS, [1.0, 1.0], SMALL, RngStream(1))
    assert any(not np.array_equal(state.policy.params[k], v) for k, v in small_policy.params.items())
    assert set(rep["cv"]) == {"consistency", "alignment"}
    assert rep["dominance_ratio"] == 0.0
    assert rep["points_processed"] == 2 * 4 * 4 * 32
    assert state.epoch == 1 and rep["kl"] >= 0.0
    # the starting policy is never mutated
    assert state.policy.params is not small_policy.params


def test_grpo_is_deterministic(small_policy, pool):
    outs = []
    for _ in range(2):
        state = pg.GrpoState.start(small_policy)
        for _ in range(2):
            pg.grpo_epoch(state, pool, CHANNELS, [1.0, 1.0], SMALL, RngStream(3))
        outs.append(state.policy.params)
    for k in outs[0]:
        assert outs[0][k].tobytes() == outs[1][k].tobytes()


def test_run_grpo_csv_and_curve(tmp_path, small_policy, pool):
    res = pg.run_grpo(small_policy, pool[:4], pool[4:], CHANNELS, [1.0, 1.0], SMALL, RngStream(0),
                      eval_every=1, csv_path=tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == ",".join(pg.EPOCH_CSV_COLUMNS)
    assert len(lines) == 1 + SMALL.epochs * 2
    assert [e for e, _ in res.eval_curve] == [0, 1, 2]
    s = res.summary(["consistency", "alignment"], [1.0, 1.0])
    assert s["epochs"] == 2 and s["status"] == "ok"
    with pytest.raises(ValueError):
        pg.run_grpo(small_policy, pool, pool, CHANNELS, [1.0], SMALL, RngStream(0))


def test_resolution_ablation_marks_failed_precondition(tmp_path, small_policy, pool):
    out = pg.resolution_ablation(small_policy, pool[:4], pool[4:], CHANNELS, [1.0, 1.0], SMALL, [32, 16], seed=1)
    assert out["arms"]["32"]["status"] == "ok"
    assert out["arms"]["16"]["status"] == "precondition_failed"
    assert out["arms"]["16"]["cost_ratio"] == pytest.approx(0.5)
    assert out["arms"]["32"]["relative_to_full"] == 1.0
    pg.write_plot_csv(tmp_path / "p.csv", out)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "epoch,series,value,cost_points"
    pg.write_summary(tmp_path / "s.json", out)
    assert json.loads((tmp_path / "s.json").read_text())["mode"] == "resolution"


def test_logtame_ablation_structure(tmp_path, small_policy, pool):
    out = pg.logtame_ablation(small_policy, pool[:4], pool[4:], CHANNELS, [6.0, 1.0], SMALL, [1, 2])
    assert [p["seed"] for p in out["pairs"]] == [1, 2]
    assert out["tamed_lower_count"] == sum(p["tamed"] < p["naive"] for p in out["pairs"])
    assert set(out["curves"]) == {"naive/seed1", "tamed/seed1", "naive/seed2", "tamed/seed2"}
    pg.write_plot_csv(tmp_path / "p.csv", out)
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 4 * SMALL.epochs


def test_default_run_raises_consistency(base_policy, prompt_pool):
    cfg = pg.GrpoConfig()
    channels = [pg.analytic_consistency_channel(), pg.alignment_channel()]
    res = pg.run_grpo(base_policy, prompt_pool[:32], prompt_pool[32:], channels, [1.0, 1.0], cfg,
                      RngStream(0).split(5))
    m = np.array([h["channel_mean"]["consistency"] for h in res.state.history])
    assert len(m) == 60
    assert np.mean(np.diff(m) > 0) >= 0.7
    assert m[-1] >= 1.2 * m[0]
