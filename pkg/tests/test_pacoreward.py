import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacolab import pacodata as pd
from pacolab import pacoreward as pr
from pacolab import rankmetrics as rm
from pacolab import toyworld as tw
from pacolab.numcore import RngStream, backward, grads_of, track


def prompts(n, seed=0):
    s = RngStream(seed)
    return [tw.random_prompt(s.split(i)) for i in range(n)]


@pytest.fixture(scope="module")
def small_data():
    return pd.build_dataset(prompts(40), RngStream(1), holdout=640)


@pytest.fixture(scope="module")
def trained(small_data):
    pairs = small_data.pairs[:500]
    scorer, log = pr.train_scorer(pairs, alpha=0.1, epochs=20, lr=1e-2, stream=RngStream(2))
    return scorer, log


def test_first_position_is_a_distribution():
    sc = pr.init_scorer(RngStream(0))
    x = RngStream(1)
    from pacolab.numcore import gaussian
    p = pr.first_position_probs(sc, gaussian(x.split(0), (20, 4)), gaussian(x.split(1), (20, 4)))
    assert p.shape == (20, pd.VOCAB_SIZE)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0)


def test_every_position_is_a_distribution():
    sc = pr.init_scorer(RngStream(0))
    inputs = pr.pair_inputs(np.zeros(4), np.ones(4) * 0.1)
    prefix = [pd.YES, 2]
    total = 0.0
    for tok in range(pd.VOCAB_SIZE):
        lps = pr.sequence_logprobs(sc, inputs, np.array([prefix + [tok]]))
        total += np.exp(lps[-1].data[0])
    assert total == pytest.approx(1.0, abs=1e-9)


def test_paco_loss_examples():
    assert pr.paco_loss([-0.1, -0.5, -0.6], 0.5) == pytest.approx(0.325, abs=1e-12)
    assert pr.paco_loss([-0.7], 0.3) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        pr.paco_loss([-0.1], 1.5)
    with pytest.raises(ValueError):
        pr.paco_loss([], 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 0), min_size=2, max_size=8), st.floats(0, 1))
def test_paco_loss_identities(lps, alpha):
    n = len(lps)
    assert pr.paco_loss(lps, 1.0 / n) == pytest.approx(-np.mean(lps), abs=1e-9)
    # affine in alpha between the decision-only and rationale-only losses
    lo, hi = pr.paco_loss(lps, 0.0), pr.paco_loss(lps, 1.0)
    assert pr.paco_loss(lps, alpha) == pytest.approx((1 - alpha) * lo + alpha * hi, abs=1e-9)
    assert hi == pytest.approx(-lps[0])


def test_paco_loss_tensor_matches_float(small_data):
    sc = pr.init_scorer(RngStream(0))
    pairs = small_data.pairs[:16]
    lps = pr.sequence_logprobs(sc, pr.pair_features(pairs), pr.pair_targets(pairs))
    t = pr.paco_loss(lps, 0.3).item()
    f = pr.paco_loss([x.data for x in lps], 0.3)
    assert t == pytest.approx(f, abs=1e-12)


def test_loss_gradient_matches_finite_differences(small_data):
    sc = pr.init_scorer(RngStream(0), hidden=8)
    pairs = small_data.pairs[:6]
    inputs, targets = pr.pair_features(pairs), pr.pair_targets(pairs)
    tensors = track(sc.params)
    backward(pr.paco_loss(pr.sequence_logprobs(sc, inputs, targets, tensors), 0.1))
    g = grads_of(tensors)
    eps = 1e-6
    for name in ("enc_W0", "emb", "pos", "out_W0"):
        if name not in sc.params:
            continue
        flat = sc.params[name].reshape(-1)
        for i in (0, flat.size // 2, flat.size - 1):
            old = flat[i]
            flat[i] = old + eps
            up = pr.paco_loss([x.data for x in pr.sequence_logprobs(sc, inputs, targets)], 0.1)
            flat[i] = old - eps
            dn = pr.paco_loss([x.data for x in pr.sequence_logprobs(sc, inputs, targets)], 0.1)
            flat[i] = old
            assert g[name].reshape(-1)[i] == pytest.approx((up - dn) / (2 * eps), rel=1e-4, abs=1e-8)


def test_zero_epochs_leaves_scorer_unchanged(small_data):
    sc = pr.init_scorer(RngStream(5))
    out, log = pr.train_scorer(small_data.pairs[:10], epochs=0, scorer=sc)
    assert log.epochs == []
    for k in sc.params:
        np.testing.assert_array_equal(out.params[k], sc.params[k])


def test_untrained_scorer_is_near_chance(small_data):
    sc = pr.init_scorer(RngStream(3))
    pairs = small_data.pairs
    p = pr.score_features(sc, pr.pair_features(pairs)[:, :4], pr.pair_features(pairs)[:, 4:8])
    auc = rm.roc_auc(p, [q.label == "consistent" for q in pairs])
    assert abs(auc - 0.5) <= 0.1


def test_training_smoke_and_decision_accuracy(trained, small_data):
    scorer, log = trained
    assert log.epochs[-1]["loss"] < log.epochs[0]["loss"]
    held = [q for inst in small_data.benchmark for q in pd.ranking_to_pairs(inst)]
    assert pr.preference_accuracy(scorer, held) > 0.8
    # pointwise thresholding is capped by label noise near the rank boundary
    assert pr.decision_accuracy(scorer, held) > 0.6


@pytest.mark.xfail(reason="500 pairs reach about 0.84-0.90 held-out preference accuracy across seeds", strict=False)
def test_500_pair_smoke_reaches_ninety_percent(trained, small_data):
    scorer, _ = trained
    held = [q for inst in small_data.benchmark for q in pd.ranking_to_pairs(inst)]
    assert pr.preference_accuracy(scorer, held) > 0.9


def test_self_pairs_beat_other_pairs(trained):
    scorer, _ = trained
    s = RngStream(11)
    wins = []
    for i in range(100):
        p, q = tw.random_prompt(s.split(2 * i)), tw.random_prompt(s.split(2 * i + 1))
        x, y = tw.render(p, 0, 0.0, None, 64), tw.render(q, 0, 0.0, None, 64)
        wins.append(pr.score(scorer, x, x) > pr.score(scorer, x, y))
    assert np.mean(wins) >= 0.95


def test_rank_candidates_matches_scores(trained, small_data):
    scorer, _ = trained
    inst = small_data.benchmark[0]
    scores = [c.score for c in pr.score_candidates(scorer, inst)]
    assert pr.rank_candidates(scorer, inst) == pd.rank_by_scores(scores)
    assert all(0.0 <= v <= 1.0 for v in scores)


def test_rank_by_scores_examples():
    assert pd.rank_by_scores([0.1, 0.9, 0.5, 0.3]) == (1, 2, 3, 0)
    assert pd.rank_by_scores([0.5, 0.5, 0.5, 0.5]) == (0, 1, 2, 3)
    assert pd.rank_by_scores([0.2, 0.7, 0.7, 0.1]) == (1, 2, 0, 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=2, max_size=6))
def test_ranking_invariant_under_monotone_transform(ints):
    scores = [v / 10 for v in ints]
    transformed = [np.exp(v) + 3 for v in scores]
    assert pd.rank_by_scores(scores) == pd.rank_by_scores(transformed)


def test_training_is_deterministic(small_data):
    pairs = small_data.pairs[:64]
    a, la = pr.train_scorer(pairs, epochs=2, stream=RngStream(4))
    b, lb = pr.train_scorer(pairs, epochs=2, stream=RngStream(4))
    assert la.epochs == lb.epochs
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_checkpoint_round_trip(tmp_path, trained, small_data):
    scorer, _ = trained
    pr.save_scorer(tmp_path / "s.ckpt", scorer, {"alpha": 0.1})
    back = pr.load_scorer(tmp_path / "s.ckpt")
    inst = small_data.benchmark[1]
    assert [c.score for c in pr.score_candidates(back, inst)] == [c.score for c in pr.score_candidates(scorer, inst)]


def test_load_rejects_other_checkpoints(tmp_path):
    from pacolab.numcore import save_checkpoint
    save_checkpoint(tmp_path / "x.ckpt", {"w": np.zeros(2)}, {"kind": "flow_model"})
    with pytest.raises(ValueError, match="not a scorer"):
        pr.load_scorer(tmp_path / "x.ckpt")


def test_divergence_is_reported(small_data):
    sc = pr.init_scorer(RngStream(0))
    sc.params["emb"][:] = np.nan
    with pytest.raises(pr.ScorerDivergedError, match="epoch 0, step 0"):
        pr.train_scorer(small_data.pairs[:8], epochs=1, scorer=sc)


def test_decision_only_mode_targets(small_data):
    t = pr.pair_targets(small_data.pairs[:4], use_rationale=False)
    assert t.shape == (4, 1) and set(t[:, 0]) <= {pd.YES, pd.NO}
    full = pr.pair_targets(small_data.pairs[:4])
    assert full.shape == (4, tw.K_ID + 2)


def test_rationale_weighting_harness(small_data):
    # both alpha settings train and are scored by the same held-out harness
    pairs, held = small_data.pairs[:300], small_data.pairs[300:500]
    accs = {}
    for alpha in (1.0, 0.1):
        sc, _ = pr.train_scorer(pairs, alpha=alpha, epochs=5, lr=1e-2, stream=RngStream(6))
        accs[alpha] = pr.preference_accuracy(sc, held)
    assert all(0.5 <= v <= 1.0 for v in accs.values())
