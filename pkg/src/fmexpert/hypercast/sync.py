"""Component-wise partial weight synchronization.

A ``Publisher`` sits next to the trainer and, once per period, snapshots a
fraction of the parameter blocks into a ``WeightDelta``. A ``ServerState``
holds the inference copy; applying a delta swaps in a new immutable
``Snapshot`` in one reference assignment, so readers that grabbed a handle
keep a consistent view.

Block choice per publish (k = ceil(fraction * n_blocks)):

1. blocks that must go now so that no block's served copy becomes older than
   W = ceil(1 / fraction) publishes (earliest deadline first);
2. blocks with the largest update-counter advance since their last publish;
3. round-robin from a rotating cursor, so idle blocks are never starved.
"""

from __future__ import annotations

import hashlib
import math
import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from fmexpert.tensor import ParamSet


class StaleDelta(ValueError):
    pass


class UnknownBlock(KeyError):
    pass


@dataclass(frozen=True)
class WeightDelta:
    source: str
    sequence: int
    blocks: tuple[tuple[str, int, np.ndarray], ...]  # (name, counter, payload)
    published_at: float = 0.0

    @property
    def names(self) -> list[str]:
        return [b[0] for b in self.blocks]


def block_digest(name: str, arr: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(name.encode())
    h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.digest()


def combine(digests: Mapping[str, bytes]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(digests):
        h.update(digests[name])
    return h.hexdigest()


def checksum(blocks: Mapping[str, np.ndarray]) -> str:
    """Order-independent digest of a set of named arrays."""
    return combine({n: block_digest(n, a) for n, a in blocks.items()})


def _fraction_ok(fraction: float) -> None:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")


class Publisher:
    """Tracks what the server has seen and decides which blocks to publish next.

    The server is assumed to start from the trainer's weights at construction
    time (that state counts as publish number 0).
    """

    def __init__(self, trainer: ParamSet, fraction: float, source: str = "fm",
                 names: Sequence[str] | None = None):
        _fraction_ok(fraction)
        self.trainer = trainer
        self.fraction = fraction
        self.source = source
        self.names = list(trainer) if names is None else list(names)
        self.window = math.ceil(1.0 / fraction)
        self.k = math.ceil(fraction * len(self.names))
        self.sequence = 0
        self.cursor = 0
        self.last_counter = {n: trainer.counters[n] for n in self.names}
        self.last_seq = {n: 0 for n in self.names}

    def _mandatory(self, s: int) -> int:
        deadlines = sorted(self.last_seq[n] + self.window for n in self.names)
        need = 0
        for j in range(1, self.window + 1):
            due = sum(1 for d in deadlines if d <= s + j - 1)
            need = max(need, due - (j - 1) * self.k)
        return min(need, self.k)

    def select(self) -> list[str]:
        s = self.sequence + 1
        n = len(self.names)
        rr = [self.names[(self.cursor + i) % n] for i in range(n)]
        rr_pos = {name: i for i, name in enumerate(rr)}
        chosen: list[str] = []
        m = self._mandatory(s)
        if m:
            by_deadline = sorted(rr, key=lambda b: (self.last_seq[b], rr_pos[b]))
            chosen += by_deadline[:m]
        advance = {b: self.trainer.counters[b] - self.last_counter[b] for b in self.names}
        for b in sorted(rr, key=lambda b: (-advance[b], rr_pos[b])):
            if len(chosen) >= self.k or advance[b] <= 0:
                break
            if b not in chosen:
                chosen.append(b)
        last_rr = None
        for b in rr:
            if len(chosen) >= self.k:
                break
            if b not in chosen:
                chosen.append(b)
                last_rr = b
        if last_rr is not None:
            self.cursor = (self.names.index(last_rr) + 1) % n
        return chosen

    def publish(self, now: float = 0.0) -> WeightDelta:
        chosen = self.select()
        self.sequence += 1
        blocks = []
        for b in chosen:
            arr = np.array(self.trainer.array(b), copy=True)
            arr.flags.writeable = False
            c = self.trainer.counters[b]
            blocks.append((b, c, arr))
            self.last_counter[b] = c
            self.last_seq[b] = self.sequence
        return WeightDelta(self.source, self.sequence, tuple(blocks), now)


def publish_partial(trainer: ParamSet, fraction: float, publisher: Publisher | None = None,
                    now: float = 0.0) -> WeightDelta:
    """One publish; pass the same ``publisher`` across calls to keep selection state."""
    _fraction_ok(fraction)
    pub = publisher if publisher is not None else Publisher(trainer, fraction)
    return pub.publish(now)


@dataclass(frozen=True)
class Snapshot:
    """Immutable server view: one array per block plus provenance."""

    blocks: Mapping[str, np.ndarray]
    counters: Mapping[str, int]
    published_at: Mapping[str, float]
    sequence: int
    checksum: str
    digests: Mapping[str, bytes]

    def params(self) -> ParamSet:
        return ParamSet(dict(self.blocks), dict(self.counters), trainable=False)

    def verify(self) -> bool:
        return checksum(self.blocks) == self.checksum


def _freeze(arr: np.ndarray) -> np.ndarray:
    a = np.array(arr, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


class ServerState:
    """Inference-side weights: single writer applies deltas, readers take snapshots."""

    def __init__(self, params: ParamSet | Mapping[str, np.ndarray], now: float = 0.0):
        if isinstance(params, ParamSet):
            blocks = {n: _freeze(params.array(n)) for n in params}
            counters = dict(params.counters)
        else:
            blocks = {n: _freeze(a) for n, a in params.items()}
            counters = {n: 0 for n in blocks}
        self._lock = threading.Lock()
        digests = {n: block_digest(n, a) for n, a in blocks.items()}
        self._snap = Snapshot(blocks, counters, {n: now for n in blocks}, 0, combine(digests), digests)

    def snapshot(self) -> Snapshot:
        return self._snap

    @property
    def sequence(self) -> int:
        return self._snap.sequence

    def apply(self, delta: WeightDelta) -> Snapshot:
        with self._lock:
            cur = self._snap
            if delta.sequence <= cur.sequence:
                raise StaleDelta(f"delta {delta.sequence} not newer than applied {cur.sequence}")
            unknown = [n for n, _, _ in delta.blocks if n not in cur.blocks]
            if unknown:
                raise UnknownBlock(f"unknown block(s) {unknown}")
            for n, _, arr in delta.blocks:
                if np.shape(arr) != cur.blocks[n].shape:
                    raise ValueError(f"{n}: shape {np.shape(arr)} != {cur.blocks[n].shape}")
            blocks = dict(cur.blocks)
            counters = dict(cur.counters)
            stamps = dict(cur.published_at)
            digests = dict(cur.digests)
            for n, c, arr in delta.blocks:
                blocks[n] = _freeze(arr)
                counters[n] = c
                stamps[n] = delta.published_at
                digests[n] = block_digest(n, blocks[n])
            snap = Snapshot(blocks, counters, stamps, delta.sequence, combine(digests), digests)
            self._snap = snap
            return snap


def apply_partial(server: ServerState, delta: WeightDelta) -> ServerState:
    server.apply(delta)
    return server


def staleness(snap: Snapshot, now: float) -> dict[str, float]:
    """Simulated seconds since each served block was snapshotted from the trainer."""
    return {n: now - t for n, t in snap.published_at.items()}


def delta_block_names(deltas: Sequence[WeightDelta]) -> set[str]:
    return {n for d in deltas for n in d.names}
