"""Synthetic multi-surface interaction stream with a known preference model.

Each request shows a user ``impressions_per_request`` candidates on one
surface. Labels are drawn from a ground-truth model in which the user's
preference is a static latent plus a recency-weighted mean of recently
engaged item latents, and part of the signal is the best match between the
candidate and individual recent items. Both terms need the (history, target)
pair, so target-independent summaries lose information by construction.

A burn-in period (negative timestamps) gives every user a history before
``t = 0``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fmexpert.encoder import EncoderConfig, SequenceBatch, age_bucket, hash_index
from fmexpert.foundation import MAIN_TASKS, ConfigError

SURFACE_NAMES = "ABCDEFGH"
DAY = 86400.0
ACTION_WEIGHTS = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
N_ACTIONS = 5
RECENT_K = 10


def aux_task_name(surface: int, k: int) -> str:
    return f"surface_{SURFACE_NAMES[surface]}_task_{k}"


@dataclass(frozen=True)
class StreamConfig:
    seed: int = 0
    n_users: int = 500
    n_items: int = 800
    n_surfaces: int = 4
    n_requests: int = 25000
    impressions_per_request: int = 8
    days: float = 7.0
    burn_in_days: float = 2.0
    latent_dim: int = 8
    latent_scale: float = 0.6
    drift: bool = True
    drift_user: float = 0.15
    drift_item: float = 0.05
    history_decay_hours: float = 24.0
    aux_tasks_per_surface: tuple[int, ...] = (3, 3, 3, 5)
    surface_shares: tuple[float, ...] | None = None
    feature_dim: int = 4

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_requests, self.impressions_per_request, self.n_surfaces) <= 0:
            raise ConfigError("stream sizes must be positive")
        if len(self.aux_tasks_per_surface) != self.n_surfaces:
            raise ConfigError("aux_tasks_per_surface needs one entry per surface")
        if self.surface_shares is not None and len(self.surface_shares) != self.n_surfaces:
            raise ConfigError("surface_shares needs one entry per surface")

    @property
    def task_names(self) -> tuple[str, ...]:
        names = list(MAIN_TASKS)
        for s, n in enumerate(self.aux_tasks_per_surface):
            names += [aux_task_name(s, k) for k in range(1, n + 1)]
        return tuple(names)

    def task_surface(self) -> dict[str, int | None]:
        out: dict[str, int | None] = {t: None for t in MAIN_TASKS}
        for s, n in enumerate(self.aux_tasks_per_surface):
            for k in range(1, n + 1):
                out[aux_task_name(s, k)] = s
        return out


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    surface_id: int
    ts: float
    labels: dict[str, int]
    ctx: dict


class GroundTruth:
    """Latent preference model; ``logits`` is the single source of label probabilities."""

    def __init__(self, cfg: StreamConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 17])
        k, sc = cfg.latent_dim, cfg.latent_scale
        n_days = int(math.ceil(cfg.days + cfg.burn_in_days)) + 1
        self.user0 = rng.normal(0, sc, (cfg.n_users, k))
        self.item0 = rng.normal(0, sc, (cfg.n_items, k))
        self.item_bias = rng.normal(0, 0.5, cfg.n_items)
        if cfg.drift:
            self.user_walk = np.cumsum(rng.normal(0, cfg.drift_user * sc, (n_days, cfg.n_users, k)), axis=0)
            self.item_walk = np.cumsum(rng.normal(0, cfg.drift_item * sc, (n_days, cfg.n_items, k)), axis=0)
        else:
            self.user_walk = self.item_walk = None
        names = cfg.task_names
        T = len(names)
        base_main = {"like": -2.2, "share": -3.2, "video_complete": -1.0, "vvd": -0.4}
        self.base = np.zeros((T, cfg.n_surfaces))
        self.facet = np.ones((T, k))
        self.aff_scale = np.zeros(T)
        self.sim_scale = np.zeros(T)
        self.pop_scale = np.zeros(T)
        self.tod_phase = rng.uniform(0, 2 * np.pi, T)
        self.tod_amp = rng.uniform(0.2, 0.5, cfg.n_surfaces)
        for t, name in enumerate(names):
            if name in base_main:
                self.base[t] = base_main[name] + rng.normal(0, 0.3, cfg.n_surfaces)
                self.aff_scale[t] = rng.uniform(1.2, 1.8)
                self.sim_scale[t] = rng.uniform(0.8, 1.4)
                self.pop_scale[t] = rng.uniform(0.3, 0.8)
            else:
                self.base[t] = rng.normal(-1.5, 0.4)
                f = np.abs(rng.normal(1.0, 0.6, k))
                self.facet[t] = f / f.mean()
                self.aff_scale[t] = rng.uniform(1.0, 1.8)
                self.sim_scale[t] = rng.uniform(0.5, 1.4)
                self.pop_scale[t] = rng.uniform(0.2, 0.8)
        self.item_pop = rng.dirichlet(np.full(cfg.n_items, 0.8))

    def _day(self, ts: float) -> int:
        return int((ts + self.cfg.burn_in_days * DAY) // DAY)

    def user_latent(self, user: int, ts: float) -> np.ndarray:
        u = self.user0[user]
        return u if self.user_walk is None else u + self.user_walk[self._day(ts), user]

    def item_latent(self, items: np.ndarray, ts: float) -> np.ndarray:
        v = self.item0[items]
        return v if self.item_walk is None else v + self.item_walk[self._day(ts), items]

    def logits(self, pref: np.ndarray, recent: np.ndarray, items: np.ndarray, surface: int,
               ts: float) -> np.ndarray:
        """Task logits, shape (len(items), T). ``recent`` holds latents of recently engaged items."""
        v = self.item_latent(items, ts)
        aff = (pref[None, :] * v) @ self.facet.T  # (n, T)
        if len(recent):
            vn = v / np.linalg.norm(v, axis=1, keepdims=True)
            rn = recent / np.linalg.norm(recent, axis=1, keepdims=True)
            sim = (vn @ rn.T).max(axis=1)
        else:
            sim = np.zeros(len(items))
        hour = (ts % DAY) / 3600.0
        tod = self.tod_amp[surface] * np.sin(2 * np.pi * hour / 24.0 + self.tod_phase)
        return (self.base[:, surface][None, :] + self.aff_scale[None, :] * aff
                + self.sim_scale[None, :] * sim[:, None]
                + self.pop_scale[None, :] * self.item_bias[items][:, None] + tod[None, :])


@dataclass
class _UserState:
    acc: np.ndarray
    weight: float = 0.0
    last_ts: float = -np.inf
    recent: list[int] = field(default_factory=list)


@dataclass
class EventLog:
    """Column store of interaction events plus a per-request index."""

    task_names: tuple[str, ...]
    request_id: np.ndarray
    user_id: np.ndarray
    item_id: np.ndarray
    surface_id: np.ndarray
    ts: np.ndarray
    labels: np.ndarray  # (E, T) int8, -1 where the task is undefined for the event
    features: np.ndarray  # (E, F)
    prob: np.ndarray | None = None  # ground-truth probability (E, T)
    prob_hist: np.ndarray | None = None  # best history-only probability (E, T)
    req_start: np.ndarray = field(default=None)  # type: ignore[assignment]
    req_count: np.ndarray = field(default=None)  # type: ignore[assignment]
    user_events: list[np.ndarray] = field(default=None)  # type: ignore[assignment]
    hist_end: np.ndarray = field(default=None)  # type: ignore[assignment]  # per event

    def __post_init__(self):
        if self.req_start is None:
            self._index()

    def _index(self) -> None:
        rid = self.request_id
        if len(rid) and np.any(np.diff(rid) < 0):
            raise ValueError("events must be grouped by ascending request id")
        starts = np.r_[0, np.nonzero(np.diff(rid))[0] + 1] if len(rid) else np.zeros(0, np.int64)
        self.req_start = starts.astype(np.int64)
        self.req_count = np.diff(np.r_[starts, len(rid)]).astype(np.int64)
        n_users = int(self.user_id.max()) + 1 if len(rid) else 0
        order = np.argsort(self.user_id, kind="stable")
        splits = np.searchsorted(self.user_id[order], np.arange(n_users + 1))
        self.user_events = [order[splits[u]:splits[u + 1]] for u in range(n_users)]
        # number of the user's events strictly before each event's timestamp
        self.hist_end = np.zeros(len(rid), np.int64)
        for ev in self.user_events:
            if len(ev):
                self.hist_end[ev] = np.searchsorted(self.ts[ev], self.ts[ev], side="left")

    def __len__(self) -> int:
        return len(self.request_id)

    @property
    def n_requests(self) -> int:
        return len(self.req_start)

    @property
    def delta(self) -> np.ndarray:
        return (self.labels >= 0).astype(np.float64)

    @property
    def action(self) -> np.ndarray:
        col = {n: i for i, n in enumerate(self.task_names)}
        lab = np.maximum(self.labels, 0)
        a = np.zeros(len(self), np.int64)
        for level, name in enumerate(("vvd", "video_complete", "like", "share"), start=1):
            a = np.where(lab[:, col[name]] == 1, level, a)
        return a

    def request_of(self, req: int) -> np.ndarray:
        return np.arange(self.req_start[req], self.req_start[req] + self.req_count[req])

    def history(self, event: int, max_len: int | None = None) -> np.ndarray:
        """Event indices of the user's history strictly before this event's time."""
        ev = self.user_events[self.user_id[event]]
        end = self.hist_end[event]
        start = 0 if max_len is None else max(0, end - max_len)
        return ev[start:end]

    def event(self, i: int) -> InteractionEvent:
        labels = {n: int(v) for n, v in zip(self.task_names, self.labels[i]) if v >= 0}
        ctx = {"request_id": int(self.request_id[i]), "features": [float(x) for x in self.features[i]]}
        return InteractionEvent(int(self.user_id[i]), int(self.item_id[i]), int(self.surface_id[i]),
                                float(self.ts[i]), labels, ctx)

    def subset(self, mask: np.ndarray) -> EventLog:
        """Events where ``mask`` holds; request and user indices are rebuilt."""
        m = np.asarray(mask, dtype=bool)
        return EventLog(self.task_names, self.request_id[m], self.user_id[m], self.item_id[m],
                        self.surface_id[m], self.ts[m], self.labels[m], self.features[m],
                        None if self.prob is None else self.prob[m],
                        None if self.prob_hist is None else self.prob_hist[m])


def _distinct_candidates(rng: np.random.Generator, pop: np.ndarray, R: int, M: int) -> np.ndarray:
    """Popularity-weighted draws without replacement (Gumbel top-k), chunked for memory."""
    if M > len(pop):
        raise ConfigError("impressions_per_request exceeds n_items")
    logp = np.log(pop)
    out = np.empty((R, M), np.int64)
    step = max(1, 2_000_000 // len(pop))
    for lo in range(0, R, step):
        hi = min(R, lo + step)
        keys = logp[None, :] + rng.gumbel(size=(hi - lo, len(pop)))
        top = np.argpartition(-keys, M - 1, axis=1)[:, :M]
        order = np.argsort(-np.take_along_axis(keys, top, axis=1), axis=1)
        out[lo:hi] = np.take_along_axis(top, order, axis=1)
    return out


def generate(cfg: StreamConfig, n_mc: int = 32) -> tuple[EventLog, GroundTruth]:
    """Deterministic stream under ``cfg.seed``."""
    gt = GroundTruth(cfg)
    rng = np.random.default_rng([cfg.seed, 29])
    R, M, F = cfg.n_requests, cfg.impressions_per_request, cfg.feature_dim
    names = cfg.task_names
    T = len(names)
    scope = cfg.task_surface()
    defined = np.array([[scope[n] is None or scope[n] == s for n in names] for s in range(cfg.n_surfaces)])
    start, stop = -cfg.burn_in_days * DAY, cfg.days * DAY
    req_ts = np.sort(np.round(rng.uniform(start, stop, R)))
    activity = rng.lognormal(0, 0.5, cfg.n_users)
    req_user = rng.choice(cfg.n_users, R, p=activity / activity.sum())
    shares = np.full(cfg.n_surfaces, 1.0 / cfg.n_surfaces) if cfg.surface_shares is None \
        else np.asarray(cfg.surface_shares) / np.sum(cfg.surface_shares)
    req_surface = rng.choice(cfg.n_surfaces, R, p=shares)
    cands = _distinct_candidates(rng, gt.item_pop, R, M)
    decay_s = cfg.history_decay_hours * 3600.0

    E = R * M
    labels = np.full((E, T), -1, np.int8)
    prob = np.full((E, T), np.nan)
    prob_hist = np.full((E, T), np.nan)
    feats = np.zeros((E, F))
    n_hist = np.zeros(cfg.n_users, np.int64)
    states = [_UserState(np.zeros(cfg.latent_dim)) for _ in range(cfg.n_users)]
    col = {n: i for i, n in enumerate(names)}
    act_cols = [col["vvd"], col["video_complete"], col["like"], col["share"]]
    u_draw = rng.random((E, T))
    feat_noise = rng.normal(0, 0.3, E)
    mc_items = rng.choice(cfg.n_items, (R, n_mc), p=gt.item_pop)

    for r in range(R):
        u, s, ts = int(req_user[r]), int(req_surface[r]), float(req_ts[r])
        st = states[u]
        decay = math.exp(-(ts - st.last_ts) / decay_s) if np.isfinite(st.last_ts) else 0.0
        pref = gt.user_latent(u, ts) + (st.acc * decay) / (st.weight * decay + 1.0)
        recent = gt.item_latent(np.array(st.recent, dtype=np.int64), ts) if st.recent else np.zeros((0, cfg.latent_dim))
        items = cands[r]
        z = gt.logits(pref, recent, items, s, ts)
        p = 1.0 / (1.0 + np.exp(-z))
        zh = gt.logits(pref, recent, mc_items[r], s, ts)
        ph = (1.0 / (1.0 + np.exp(-zh))).mean(axis=0)
        lo, hi = r * M, (r + 1) * M
        y = (u_draw[lo:hi] < p).astype(np.int8)
        ok = defined[s]
        labels[lo:hi][:, ok] = y[:, ok]
        prob[lo:hi][:, ok] = p[:, ok]
        prob_hist[lo:hi][:, ok] = np.broadcast_to(ph, p.shape)[:, ok]
        hour = (ts % DAY) / 3600.0
        feats[lo:hi, 0] = gt.item_bias[items] + feat_noise[lo:hi]
        feats[lo:hi, 1] = np.sin(2 * np.pi * hour / 24)
        feats[lo:hi, 2] = np.cos(2 * np.pi * hour / 24)
        feats[lo:hi, 3] = np.log1p(n_hist[u]) / 5.0
        # fold this request's engagement into the user's state
        act = np.zeros(M, np.int64)
        for level, c in enumerate(act_cols, start=1):
            act = np.where(y[:, c] == 1, level, act)
        w = ACTION_WEIGHTS[act]
        v = gt.item_latent(items, ts)
        st.acc = st.acc * decay + (w[:, None] * v).sum(axis=0)
        st.weight = st.weight * decay + w.sum()
        st.last_ts = ts
        for it, a in zip(items, act):
            if a > 0:
                st.recent.append(int(it))
        del st.recent[:-RECENT_K]
        n_hist[u] += M

    log = EventLog(names, np.repeat(np.arange(R), M), np.repeat(req_user, M), cands.reshape(-1),
                   np.repeat(req_surface, M), np.repeat(req_ts, M), labels, feats, prob, prob_hist)
    return log, gt


# --- joining -----------------------------------------------------------------

@dataclass
class TrainingExample:
    event: int
    user_id: int
    item_id: int
    surface_id: int
    ts: float
    request_id: int
    history: tuple[int, ...]
    labels: np.ndarray
    delta: np.ndarray
    embeddings: dict[str, np.ndarray]
    available_at: float


@dataclass
class JoinStats:
    joined: int = 0
    missing: int = 0


def join(events: EventLog, embedding_log: Mapping[tuple[int, int], Mapping[str, np.ndarray]],
         latency: float, stats: JoinStats | None = None, max_history: int = 64,
         indices: Iterable[int] | None = None) -> Iterator[TrainingExample]:
    """Release one example per event at ``ts + latency`` with every logged embedding version.

    ``embedding_log`` maps (request_id, item_id) to {version: vector}. Events
    with no logged embedding still produce an example, with an empty map, and
    are counted in ``stats.missing``.
    """
    stats = stats if stats is not None else JoinStats()
    delta = events.delta
    order = range(len(events)) if indices is None else indices
    for i in order:
        key = (int(events.request_id[i]), int(events.item_id[i]))
        emb = dict(embedding_log.get(key, {}))
        if emb:
            stats.joined += 1
        else:
            stats.missing += 1
        ts = float(events.ts[i])
        yield TrainingExample(
            event=int(i), user_id=int(events.user_id[i]), item_id=int(events.item_id[i]),
            surface_id=int(events.surface_id[i]), ts=ts, request_id=key[0],
            history=tuple(int(h) for h in events.history(i, max_history)),
            labels=events.labels[i], delta=delta[i], embeddings=emb, available_at=ts + latency)


def released(examples: Iterable[TrainingExample], now: float) -> Iterator[TrainingExample]:
    for ex in examples:
        if ex.available_at <= now:
            yield ex


def downsample_mask(events: EventLog, ratios: Mapping[int, float], seed: int = 0) -> np.ndarray:
    for s, f in ratios.items():
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"downsample fraction for surface {s} must be in (0, 1], got {f}")
    key = hash_index(events.user_id * 1_000_003 + events.item_id, 2**31 - 1, salt=seed)
    key = hash_index(key * 65_537 + events.ts.astype(np.int64), 2**31 - 1, salt=seed + 7)
    u = key / float(2**31 - 1)
    frac = np.array([ratios.get(int(s), 1.0) for s in range(int(events.surface_id.max()) + 1)])
    return u < frac[events.surface_id]


def downsample(stream: Iterable, ratios: Mapping[int, float], seed: int = 0) -> Iterator:
    """Keep each item of ``stream`` (events or examples) with its surface's fraction."""
    for s, f in ratios.items():
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"downsample fraction for surface {s} must be in (0, 1], got {f}")
    for x in stream:
        f = ratios.get(x.surface_id, 1.0)
        if f >= 1.0:
            yield x
            continue
        k = hash_index(np.array([x.user_id * 1_000_003 + x.item_id]), 2**31 - 1, salt=seed)
        k = hash_index(k * 65_537 + int(x.ts), 2**31 - 1, salt=seed + 7)
        if k[0] / float(2**31 - 1) < f:
            yield x


# --- batching ----------------------------------------------------------------

def request_batch(log: EventLog, reqs: Sequence[int], cfg: EncoderConfig,
                  event_mask: np.ndarray | None = None) -> tuple[SequenceBatch, np.ndarray]:
    """Pad the given requests into a SequenceBatch; returns it and the target event indices.

    History is the user's events strictly before the request (most recent
    ``cfg.max_history``), each tagged with its recency bucket. Targets are the
    request's events passing ``event_mask``; requests with none are dropped.
    """
    H = cfg.max_history
    action = log.action
    rows = []
    targets = []
    for r in reqs:
        ev = log.request_of(int(r))
        if event_mask is not None:
            ev = ev[event_mask[ev]]
        if len(ev):
            rows.append(int(r))
            targets.append(ev)
    B = len(rows)
    M = max((len(t) for t in targets), default=1)
    hi = np.zeros((B, H), np.int64)
    hs = np.zeros((B, H), np.int64)
    hb = np.zeros((B, H), np.int64)
    ha = np.zeros((B, H), np.int64)
    hl = np.zeros(B, np.int64)
    ti = np.zeros((B, M), np.int64)
    tsf = np.zeros((B, M), np.int64)
    tl = np.zeros(B, np.int64)
    for b, (r, tg) in enumerate(zip(rows, targets)):
        first = log.req_start[r]
        h = log.history(first, H) if H else np.zeros(0, np.int64)
        n = len(h)
        hl[b] = n
        if n:
            hi[b, :n] = log.item_id[h]
            hs[b, :n] = log.surface_id[h]
            hb[b, :n] = age_bucket(log.ts[first] - log.ts[h])
            ha[b, :n] = action[h]
        ti[b, :len(tg)] = log.item_id[tg]
        tsf[b, :len(tg)] = log.surface_id[tg]
        tl[b] = len(tg)
    seq = SequenceBatch.from_arrays(hi, hs, hb, ha, hl, ti, tsf, tl, cfg)
    tgt = np.concatenate(targets) if targets else np.zeros(0, np.int64)
    return seq, tgt


# --- event log file ------------------------------------------------------------

EVENT_FIELDS = ("user_id", "item_id", "surface_id", "ts", "labels", "ctx")


def event_to_record(ev: InteractionEvent) -> dict:
    return {"user_id": ev.user_id, "item_id": ev.item_id, "surface_id": ev.surface_id,
            "ts": ev.ts, "labels": ev.labels, "ctx": ev.ctx}


def write_events(path: str | Path, log: EventLog) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for i in range(len(log)):
            fh.write(json.dumps(event_to_record(log.event(i)), separators=(",", ":"), sort_keys=True))
            fh.write("\n")
    return len(log)


def read_events(path: str | Path) -> Iterator[InteractionEvent]:
    with Path(path).open() as fh:
        for n, line in enumerate(fh, 1):
            rec = json.loads(line)
            if set(rec) != set(EVENT_FIELDS):
                raise ValueError(f"line {n}: unexpected fields {sorted(rec)}")
            yield InteractionEvent(rec["user_id"], rec["item_id"], rec["surface_id"], rec["ts"],
                                   rec["labels"], rec["ctx"])


# --- raw serving requests ------------------------------------------------------

@dataclass
class RawRequest:
    """One ranking request as the serving tiers see it (history chronological)."""

    request_id: int
    user_id: int
    ts: float
    hist_items: np.ndarray
    hist_surface: np.ndarray
    hist_bucket: np.ndarray
    hist_action: np.ndarray
    cand_items: np.ndarray
    cand_surface: np.ndarray
    hist_count: int = 0  # user's total history length, not just the kept window

    @property
    def n_candidates(self) -> int:
        return len(self.cand_items)


def raw_requests(log: EventLog, reqs: Sequence[int], max_history: int,
                 event_mask: np.ndarray | None = None) -> tuple[list[RawRequest], list[np.ndarray]]:
    """Serving view of requests plus, per request, the event index of each candidate."""
    action = log.action
    out, events = [], []
    for r in reqs:
        ev = log.request_of(int(r))
        if event_mask is not None:
            ev = ev[event_mask[ev]]
        if not len(ev):
            continue
        first = log.req_start[r]
        h = log.history(first, max_history) if max_history else np.zeros(0, np.int64)
        ts = float(log.ts[first])
        out.append(RawRequest(
            int(r), int(log.user_id[first]), ts, log.item_id[h], log.surface_id[h],
            age_bucket(ts - log.ts[h]) if len(h) else np.zeros(0, np.int64), action[h],
            log.item_id[ev], log.surface_id[ev], int(log.hist_end[first])))
        events.append(ev)
    return out, events


def raw_batch(raws: Sequence[RawRequest], cfg: EncoderConfig) -> SequenceBatch:
    """Pad raw requests for an encoder, keeping each user's most recent history."""
    H = cfg.max_history
    B = len(raws)
    M = max((r.n_candidates for r in raws), default=1)
    hi = np.zeros((B, H), np.int64)
    hs = np.zeros((B, H), np.int64)
    hb = np.zeros((B, H), np.int64)
    ha = np.zeros((B, H), np.int64)
    hl = np.zeros(B, np.int64)
    ti = np.zeros((B, M), np.int64)
    tsf = np.zeros((B, M), np.int64)
    tl = np.zeros(B, np.int64)
    for b, r in enumerate(raws):
        n = min(H, len(r.hist_items))
        if n:
            hi[b, :n] = r.hist_items[-n:]
            hs[b, :n] = r.hist_surface[-n:]
            hb[b, :n] = r.hist_bucket[-n:]
            ha[b, :n] = r.hist_action[-n:]
        hl[b] = n
        m = r.n_candidates
        ti[b, :m] = r.cand_items
        tsf[b, :m] = r.cand_surface
        tl[b] = m
    return SequenceBatch.from_arrays(hi, hs, hb, ha, hl, ti, tsf, tl, cfg)
