from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats as sps

from fmexpert.evaluation import normalized_entropy
from fmexpert.foundation import ConfigError
from fmexpert.stream import (DAY, EVENT_FIELDS, EventLog, JoinStats, StreamConfig, downsample, downsample_mask, generate,
                             join, read_events, released, write_events)

SMALL = StreamConfig(seed=3, n_users=60, n_items=120, n_requests=1500, days=2.0, burn_in_days=0.5, latent_dim=4)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def _equal_logs(a, b):
    for f in ("request_id", "user_id", "item_id", "surface_id", "ts", "labels", "features", "prob"):
        if not np.array_equal(getattr(a, f), getattr(b, f), equal_nan=f == "prob"):
            return False
    return True


def test_same_seed_same_stream(small):
    ev, _ = small
    again, _ = generate(SMALL)
    assert _equal_logs(ev, again)
    other, _ = generate(StreamConfig(**{**SMALL.__dict__, "seed": 4}))
    assert not _equal_logs(ev, other)


def test_invalid_sizes_rejected():
    with pytest.raises(ConfigError):
        StreamConfig(n_users=0)
    with pytest.raises(ConfigError):
        StreamConfig(n_surfaces=2)


def test_timestamps_non_decreasing_per_user(small):
    ev, _ = small
    for idx in ev.user_events:
        assert np.all(np.diff(ev.ts[idx]) >= 0)


def test_drift_off_label_marginals_stationary():
    cfg = StreamConfig(seed=11, n_users=200, n_items=300, n_requests=12000, days=4.0, burn_in_days=2.0,
                       drift=False, latent_dim=4)
    ev, _ = generate(cfg)
    keep = ev.ts >= 0
    first = keep & (ev.ts < 2 * DAY)
    for t, name in enumerate(ev.task_names):
        defined = ev.labels[:, t] >= 0
        a = ev.labels[first & defined, t]
        b = ev.labels[keep & ~first & defined, t]
        table = np.array([[a.sum(), len(a) - a.sum()], [b.sum(), len(b) - b.sum()]])
        p = sps.chi2_contingency(table, correction=False)[1]
        assert p > 0.01, (name, table, p)


def test_oracle_beats_constant_and_history_only(small):
    ev, _ = small
    for t, name in enumerate(ev.task_names):
        m = ev.labels[:, t] >= 0
        y = ev.labels[m, t]
        oracle = normalized_entropy(y, ev.prob[m, t]).ne
        assert oracle < 1.0
        hist_only = normalized_entropy(y, ev.prob_hist[m, t]).ne
        assert hist_only - oracle > 0.02, (name, oracle, hist_only)


@pytest.mark.parametrize("latency", [0.0, 1800.0])
def test_join_latency_exact(small, latency):
    ev, _ = small
    out = list(join(ev, {}, latency, indices=range(200)))
    gaps = np.array([x.available_at - x.ts for x in out])
    assert np.all(gaps == latency) and gaps.mean() == latency


def test_join_release_time_example():
    one = EventLog(("like",), np.array([0]), np.array([0]), np.array([7]), np.array([0]), np.array([100.0]),
                   np.array([[1]], np.int8), np.zeros((1, 1)))
    ex = next(join(one, {}, 1800.0))
    assert ex.available_at == 1900.0
    assert list(released([ex], 1899.0)) == [] and list(released([ex], 1900.0)) == [ex]


def test_join_attaches_all_versions_and_counts_missing(small):
    ev, _ = small
    log = {}
    for i in range(0, 300, 2):
        key = (int(ev.request_id[i]), int(ev.item_id[i]))
        log[key] = {"A": np.full(3, i, float), "B": np.full(3, -i, float)}
    st = JoinStats()
    out = list(join(ev, log, 0.0, st, indices=range(300)))
    assert st.joined == 150 and st.missing == 150
    for x in out:
        assert set(x.embeddings) == ({"A", "B"} if x.event % 2 == 0 else set())


def test_join_history_strictly_before_event(small):
    ev, _ = small
    for x in join(ev, {}, 1800.0, max_history=1000):
        h = np.array(x.history, dtype=np.int64)
        assert x.event not in x.history
        assert np.all(ev.ts[h] < x.ts) and np.all(ev.user_id[h] == x.user_id)


def test_downsample_identity_and_errors(small):
    ev, _ = small
    assert downsample_mask(ev, {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}).all()
    ex = list(join(ev, {}, 0.0, indices=range(100)))
    assert list(downsample(ex, {s: 1.0 for s in range(4)})) == ex
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            downsample_mask(ev, {0: bad})
        with pytest.raises(ConfigError):
            list(downsample(ex, {0: bad}))


def test_downsample_binomial_and_deterministic():
    cfg = StreamConfig(seed=5, n_users=300, n_items=400, n_requests=12500, n_surfaces=1,
                       aux_tasks_per_surface=(1,), days=1.0, burn_in_days=0.0, latent_dim=4)
    ev, _ = generate(cfg)
    n = len(ev)
    assert n == 100_000
    m = downsample_mask(ev, {0: 0.5}, seed=1)
    assert abs(m.sum() - n * 0.5) <= 3 * math.sqrt(n * 0.25)
    assert np.array_equal(m, downsample_mask(ev, {0: 0.5}, seed=1))
    assert not np.array_equal(m, downsample_mask(ev, {0: 0.5}, seed=2))
    # the streaming form keeps exactly the same examples
    ex = list(join(ev, {}, 0.0, indices=range(5000)))
    kept = [x.event for x in downsample(ex, {0: 0.5}, seed=1)]
    assert kept == [i for i in range(5000) if m[i]]


def test_downsample_only_touches_listed_surface(small):
    ev, _ = small
    m = downsample_mask(ev, {2: 0.3}, seed=0)
    assert m[ev.surface_id != 2].all()
    frac = m[ev.surface_id == 2].mean()
    assert 0.2 < frac < 0.4


def test_event_file_roundtrip(small, tmp_path):
    ev, _ = small
    sub = ev.subset(np.arange(len(ev)) < 64)
    path = tmp_path / "events.jsonl"
    assert write_events(path, sub) == 64
    back = list(read_events(path))
    assert back == [sub.event(i) for i in range(64)]
    path.write_text(path.read_text().replace('"ctx"', '"extra"', 1))
    with pytest.raises(ValueError):
        list(read_events(path))
    assert set(EVENT_FIELDS) == {"user_id", "item_id", "surface_id", "ts", "labels", "ctx"}
