import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icr_policies.certainty import (
    CertaintySample,
    collect_samples,
    ecdf,
    format_p,
    ks_two_sample,
    margin,
    run_h2,
)
from icr_policies.evaluation import PredictionDump


def brute_ks(a, b):
    """Supremum of |ECDF_a - ECDF_b| over every point of the merged sample."""
    def F(xs, t):
        return sum(1 for x in xs if x <= t) / len(xs)
    return max(abs(F(a, t) - F(b, t)) for t in list(a) + list(b))


def brute_margin(p):
    return abs(p - (1 - p))


def test_margin_examples():
    assert margin(0.5) == 0
    assert margin(1.0) == 1 and margin(0.0) == 1
    assert margin(0.75) == 0.5
    with pytest.raises(ValueError):
        margin(1.2)
    with pytest.raises(ValueError):
        margin(np.array([0.5, -0.1]))


def test_margin_matches_oracle_and_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.random(int(rng.integers(1, 65)))
        assert np.max(np.abs(margin(p) - np.array([brute_margin(x) for x in p]))) <= 1e-9
    p = rng.random(1000)
    assert np.allclose(margin(p), margin(1 - p), atol=1e-12)


def test_ks_examples():
    assert ks_two_sample([0.1, 0.4, 0.9], [0.2, 0.5])[0] == pytest.approx(1 / 3)
    assert ks_two_sample([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    assert ks_two_sample([0.1, 0.2], [0.5, 0.7, 0.9])[0] == 1.0
    with pytest.raises(ValueError):
        ks_two_sample([], [1.0])


def test_ks_matches_oracle_on_200_instances():
    rng = np.random.default_rng(1)
    for k in range(200):
        a = rng.integers(0, 6, int(rng.integers(1, 33))) / 5 if k % 2 else rng.random(int(rng.integers(1, 33)))
        b = rng.integers(0, 6, int(rng.integers(1, 33))) / 5 if k % 2 else rng.random(int(rng.integers(1, 33)))
        assert abs(ks_two_sample(a, b)[0] - brute_ks(a, b)) <= 1e-9


def test_ks_symmetry_on_1000_samples():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        a, b = rng.random(int(rng.integers(1, 20))), rng.random(int(rng.integers(1, 20)))
        s_ab, p_ab = ks_two_sample(a, b)
        s_ba, p_ba = ks_two_sample(b, a)
        assert s_ab == s_ba and p_ab == p_ba and 0 <= s_ab <= 1


def test_ks_p_value_is_limiting_kolmogorov():
    from scipy.stats import kstwobign, ks_2samp

    rng = np.random.default_rng(3)
    a, b = rng.normal(size=400), rng.normal(0.2, size=300)
    stat, p = ks_two_sample(a, b)
    ref = ks_2samp(a, b, method="asymp")
    assert stat == pytest.approx(ref.statistic, abs=1e-12)
    en = np.sqrt(400 * 300 / 700)
    assert p == pytest.approx(kstwobign.sf(en * stat), rel=1e-9)
    # scipy's finite-n variant lands in the same decade
    assert 0.5 < p / ref.pvalue < 2


def test_tiny_p_values_reported_below_floor():
    stat, p = ks_two_sample(np.zeros(5000), np.ones(5000))
    assert stat == 1.0 and format_p(p) == "< 1e-300"
    assert format_p(0.0312) == "0.0312"


def test_permutation_sanity():
    rng = np.random.default_rng(4)
    values = np.concatenate([rng.beta(5, 1, 3000), rng.beta(2, 2, 3000)])
    labels = rng.permutation(np.r_[np.ones(3000, bool), np.zeros(3000, bool)])
    stat, p = ks_two_sample(values[labels], values[~labels])
    assert stat < 0.05 and p > 0.001


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
@settings(max_examples=100, deadline=None)
def test_ecdf_is_nondecreasing_step_to_one(xs):
    x, y = ecdf(xs)
    assert np.all(np.diff(x) >= 0) and np.all(np.diff(y) > 0)
    assert y[-1] == 1.0 and y[0] > 0


def test_sample_validation():
    with pytest.raises(ValueError):
        CertaintySample("icr", "clipart", np.array([1.5]))


def _dump_from_probs(probs, turn_labels, clip_labels):
    probs = np.asarray(probs, dtype=np.float64)
    logits = np.log(probs) - np.log1p(-probs)
    n = probs.shape[0]
    action_logits = np.zeros((n, 28, 5))
    action_logits[..., 4] = logits
    return PredictionDump(game_id=np.array([f"test_{i}" for i in range(n)]), turn_index=np.zeros(n, dtype=np.int64),
                          task="when", action_logits=action_logits, action_labels=np.zeros((n, 28, 5), np.int8),
                          icr_turn_labels=np.asarray(turn_labels, np.int8),
                          icr_clipart_labels=np.asarray(clip_labels, np.int8))


def test_collect_samples_hand_computed():
    probs = np.full((2, 28), 0.9)
    probs[0, 3] = 0.5          # turn 0 has one undecided clipart
    probs[1, 7] = 0.2
    clip = np.zeros((2, 28))
    clip[0, 3] = 1
    dump = _dump_from_probs(probs, [1, 0], clip)
    icr, non = collect_samples(dump, "turn")
    assert icr.values.tolist() == [0.0]
    assert non.values == pytest.approx([0.6])
    icr, non = collect_samples(dump, "clipart")
    assert icr.values.tolist() == [0.0] and non.values.size == 55
    assert np.sort(non.values)[0] == pytest.approx(0.6)
    with pytest.raises(ValueError):
        collect_samples(dump, "game")


def test_collect_samples_requires_action_heads():
    dump = _dump_from_probs(np.full((1, 28), 0.5), [1], np.zeros((1, 28)))
    dump.action_logits = None
    with pytest.raises(ValueError):
        collect_samples(dump, "turn")


def test_run_h2_outputs(tmp_path):
    rng = np.random.default_rng(5)
    n = 60
    turn = (rng.random(n) < 0.3).astype(int)
    clip = np.zeros((n, 28), int)
    probs = rng.beta(8, 1, (n, 28))
    for i in np.flatnonzero(turn):
        j = rng.integers(28)
        clip[i, j] = 1
        probs[i, j] = rng.uniform(0.3, 0.7)
    report = run_h2(_dump_from_probs(probs, turn, clip), tmp_path)
    lv = report["levels"]
    assert lv["clipart"]["icr"]["mean"] < lv["clipart"]["non_icr"]["mean"]
    assert lv["turn"]["icr"]["mean"] < lv["turn"]["non_icr"]["mean"]
    assert lv["clipart"]["ap_negated_margin"] > lv["clipart"]["ap_margin"]
    for name in ("table3.csv", "h2_summary.json", "h2_ecdf.json", "ecdf_clipart.svg", "ecdf_turn.svg",
                 "boxplot_clipart.svg", "boxplot_turn.svg"):
        assert (tmp_path / name).exists(), name
    summary = json.loads((tmp_path / "h2_summary.json").read_text())
    assert "negated" in summary["score_direction"]
    assert (tmp_path / "ecdf_turn.svg").read_text().lstrip().startswith("<?xml")
