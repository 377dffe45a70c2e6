from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmexpert.evaluation import (MetricUndefined, ne_diff_pct, normalized_entropy, read_report, significant,
                                 task_ne, transfer_ratio, transfer_ratio_from_diffs, write_report)


def brute_ne(labels, probs) -> float:
    """Plain-Python loop rendering of cross-entropy over base-rate entropy."""
    n = len(labels)
    p = sum(labels) / n
    ce = 0.0
    for y, q in zip(labels, probs):
        q = min(max(q, 1e-7), 1 - 1e-7)
        ce -= math.log(q) if y == 1 else math.log(1 - q)
    return (ce / n) / -(p * math.log(p) + (1 - p) * math.log(1 - p))


def test_ne_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        y = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(int)
        y[0], y[1] = 1, 0
        q = rng.uniform(0, 1, n) ** rng.uniform(0.2, 3)
        got = normalized_entropy(y, q).ne
        want = brute_ne(y.tolist(), q.tolist())
        worst = max(worst, abs(got - want))
    assert worst < 1e-12


def test_base_rate_predictor_is_one():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 500))
        y = (rng.random(n) < 0.3).astype(int)
        y[0], y[-1] = 1, 0
        assert abs(normalized_entropy(y, np.full(n, y.mean())).ne - 1.0) < 1e-12


def test_hand_example():
    r = normalized_entropy([1, 0, 0, 1], [0.8, 0.2, 0.3, 0.7])
    ce = -(2 * math.log(0.8) + 2 * math.log(0.7)) / 4
    assert ce == pytest.approx(0.2899092476, abs=1e-10)
    assert r.ne == pytest.approx(ce / math.log(2), abs=1e-12)
    assert r.ne == pytest.approx(0.4182506339, abs=1e-10)
    assert r.n == 4 and r.p == 0.5


def test_confident_correct_predictions_near_zero():
    r = normalized_entropy([1, 0, 1, 0], [1.0, 0.0, 1.0, 0.0])
    assert 0 < r.ne < 1e-6


@pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0]])
def test_single_class_undefined(labels):
    with pytest.raises(MetricUndefined) as e:
        normalized_entropy(labels, [0.5] * len(labels))
    assert e.value.code == "NE_UNDEFINED"


def test_malformed_inputs():
    with pytest.raises(ValueError):
        normalized_entropy([1, 0], [0.5])
    with pytest.raises(ValueError):
        normalized_entropy([1, 2], [0.5, 0.5])
    with pytest.raises(ValueError):
        normalized_entropy([1, 0], [np.nan, 0.5])


_case = st.integers(3, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda y: 0 < sum(y) < len(y)),
    st.lists(st.floats(0.01, 0.99), min_size=n, max_size=n),
    st.randoms(use_true_random=False)))


@settings(max_examples=100, deadline=None)
@given(case=_case)
def test_ne_permutation_invariant(case):
    y, q, r = case
    idx = list(range(len(y)))
    r.shuffle(idx)
    a = normalized_entropy(y, q).ne
    b = normalized_entropy([y[i] for i in idx], [q[i] for i in idx]).ne
    assert abs(a - b) < 1e-12


@settings(max_examples=100, deadline=None)
@given(case=_case, step=st.floats(0.05, 0.95))
def test_ne_decreases_toward_label(case, step):
    y, q, r = case
    i = r.randrange(len(y))
    moved = list(q)
    moved[i] = q[i] + step * (y[i] - q[i])
    if moved[i] == q[i]:
        return
    assert normalized_entropy(y, moved).ne < normalized_entropy(y, q).ne


def test_transfer_ratio_examples():
    assert transfer_ratio_from_diffs(-1.14, -1.05) == pytest.approx(0.9211, abs=5e-5)
    assert transfer_ratio_from_diffs(-0.50, -0.50) == 1.0
    assert transfer_ratio(0.80, 0.79, 0.70, 0.70) == 0.0
    assert transfer_ratio(0.80, 0.78, 0.75, 0.74) == pytest.approx(0.5)


def test_transfer_ratio_undefined():
    with pytest.raises(MetricUndefined) as e:
        transfer_ratio(0.8, 0.8 - 5e-5, 0.7, 0.69)
    assert e.value.code == "TR_UNDEFINED"
    with pytest.raises(MetricUndefined):
        transfer_ratio_from_diffs(0.0, -1.0)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0.3, 1.2), b=st.floats(0.3, 1.2), c=st.floats(0.3, 1.2), d=st.floats(0.3, 1.2),
       k=st.floats(-50, 50).filter(lambda k: abs(k) > 1e-3))
def test_transfer_ratio_symmetry_and_scale(a, b, c, d, k):
    if abs(a - b) <= 1e-3:
        return
    tr = transfer_ratio(a, b, c, d)
    assert transfer_ratio(b, a, d, c) == pytest.approx(tr, rel=1e-12, abs=1e-12)
    assert transfer_ratio_from_diffs(k * (b - a), k * (d - c)) == pytest.approx(tr, rel=1e-9, abs=1e-12)


def test_diff_pct_and_significance():
    assert ne_diff_pct(0.99, 1.0) == pytest.approx(-1.0)
    assert significant(-0.05) and significant(0.06) and not significant(-0.049)


def test_task_ne_respects_delta():
    y = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], float)
    d = np.array([[1, 1], [1, 0], [1, 0], [1, 0]], float)
    q = np.full((4, 2), 0.5)
    out = task_ne(y, d, q, ["a", "b"])
    assert set(out) == {"a"} and out["a"].n == 4


def test_reports_deterministic_bytes(tmp_path):
    rows = [{"task": "like", "ne": np.float64(0.5), "n": np.int64(3), "ok": np.bool_(True), "tr": float("nan")}]
    a = write_report(tmp_path / "a.jsonl", rows).read_bytes()
    b = write_report(tmp_path / "b.jsonl", [dict(reversed(list(rows[0].items())))]).read_bytes()
    assert a == b
    assert read_report(tmp_path / "a.jsonl") == [{"n": 3, "ne": 0.5, "ok": True, "task": "like", "tr": None}]
