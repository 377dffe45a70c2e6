"""Offline logging tier: materializes FM embeddings for impressed candidates.

Records go to an append-only store, keyed (request, candidate, version).
Appends are buffered and flushed in batches; a store at capacity refuses the
whole batch with ``Backpressure`` so callers can retry or shed load.

File format: one JSON object per line with the event-log field names
(user_id, item_id, surface_id, ts, labels, ctx) plus ``vec``, the base-16
little-endian f64 vector. ``ctx`` holds request_id and version.
"""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fmexpert.encoder import as_constants, encode_batch, mean_pool_history
from fmexpert.hypercast.registry import VersionRegistry
from fmexpert.hypercast.wire import hex_to_vec, vec_to_hex
from fmexpert.stream import RawRequest, raw_batch


class Backpressure(RuntimeError):
    code = "BACKPRESSURE"


class DuplicateRecord(ValueError):
    code = "DUPLICATE"


@dataclass(frozen=True)
class EmbeddingRecord:
    request_id: int
    user_id: int
    item_id: int
    version: str
    vec: np.ndarray
    ts: float
    surface_id: int = 0

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.request_id, self.item_id, self.version)

    def to_line(self) -> str:
        rec = {"user_id": self.user_id, "item_id": self.item_id, "surface_id": self.surface_id,
               "ts": self.ts, "labels": {}, "ctx": {"request_id": self.request_id, "version": self.version},
               "vec": vec_to_hex(self.vec)}
        return json.dumps(rec, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_line(cls, line: str) -> EmbeddingRecord:
        r = json.loads(line)
        return cls(int(r["ctx"]["request_id"]), int(r["user_id"]), int(r["item_id"]), str(r["ctx"]["version"]),
                   hex_to_vec(r["vec"]), float(r["ts"]), int(r["surface_id"]))


class EmbeddingStore(Mapping):
    """Append-only embedding feature store.

    As a mapping it serves joins: (request_id, item_id) -> {version: vector},
    over flushed records only.
    """

    def __init__(self, path: str | Path | None = None, batch_size: int = 4096,
                 capacity: int | None = None):
        self.path = Path(path) if path is not None else None
        self.batch_size = batch_size
        self.capacity = capacity
        self._pending: list[EmbeddingRecord] = []
        self._keys: set[tuple[int, int, str]] = set()
        self._index: dict[tuple[int, int], dict[str, np.ndarray]] = {}
        self._count: Counter[str] = Counter()
        self.flushes = 0
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    def append(self, records: Iterable[EmbeddingRecord]) -> int:
        """Buffer records atomically: on any error nothing is appended."""
        records = list(records)
        keys = [r.key for r in records]
        if len(set(keys)) != len(keys) or any(k in self._keys for k in keys):
            dup = next(k for i, k in enumerate(keys) if k in self._keys or k in keys[:i])
            raise DuplicateRecord(f"record {dup} already logged")
        if self.capacity is not None and len(self._keys) + len(records) > self.capacity:
            raise Backpressure(f"log tier at capacity ({self.capacity} records)")
        for r in records:
            self._keys.add(r.key)
        self._pending.extend(records)
        if len(self._pending) >= self.batch_size:
            self.flush()
        return len(records)

    def flush(self) -> int:
        n = len(self._pending)
        if not n:
            return 0
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write("".join(r.to_line() + "\n" for r in self._pending))
        for r in self._pending:
            vec = np.array(r.vec, dtype=np.float64)
            vec.flags.writeable = False
            self._index.setdefault((r.request_id, r.item_id), {})[r.version] = vec
            self._count[r.version] += 1
        self._pending = []
        self.flushes += 1
        return n

    @property
    def pending(self) -> int:
        return len(self._pending)

    def counts(self) -> dict[str, int]:
        return dict(sorted(self._count.items()))

    @property
    def n_records(self) -> int:
        return sum(self._count.values())

    def __getitem__(self, key):
        return self._index[key]

    def __iter__(self):
        return iter(self._index)

    def __len__(self) -> int:
        return len(self._index)

    @classmethod
    def load(cls, path: str | Path) -> EmbeddingStore:
        store = cls(None, batch_size=1 << 62)
        store.append(read_embedding_log(path))
        store.flush()
        store.path = Path(path)
        return store


def read_embedding_log(path: str | Path) -> Iterator[EmbeddingRecord]:
    with Path(path).open() as fh:
        for n, line in enumerate(fh, 1):
            try:
                yield EmbeddingRecord.from_line(line)
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{n}: bad embedding record ({e})") from None


def restrict(raw: RawRequest, keep: np.ndarray) -> RawRequest:
    keep = np.asarray(keep, dtype=bool)
    return RawRequest(raw.request_id, raw.user_id, raw.ts, raw.hist_items, raw.hist_surface,
                      raw.hist_bucket, raw.hist_action, raw.cand_items[keep], raw.cand_surface[keep],
                      raw.hist_count)


class LogTier:
    """Computes and stores embeddings of impressed candidates for every active version."""

    def __init__(self, registry: VersionRegistry, store: EmbeddingStore):
        self.registry = registry
        self.store = store
        self._ue_cache: dict[str, dict[int, tuple[np.ndarray, int]]] = {}
        self.last_checksums: dict[str, str] = {}

    def records_for(self, raws: Sequence[RawRequest]) -> list[EmbeddingRecord]:
        raws = [r for r in raws if r.n_candidates]
        if not raws:
            return []
        reg = self.registry
        active = reg.active()
        outs = {}
        recs: list[EmbeddingRecord] = []

        def run(tag):
            if tag not in outs:
                e = reg.resolve(tag)
                snap = e.server.snapshot()
                out = encode_batch(raw_batch(raws, e.encoder), as_constants(snap.blocks), e.encoder)
                outs[tag] = out
                self.last_checksums[tag] = snap.checksum
            return outs[tag]

        for tag in active:
            e = reg.entry(tag)
            if e.kind == "tae":
                emb = run(tag).targets.data
                i = 0
                for r in raws:
                    for it, s in zip(r.cand_items, r.cand_surface):
                        recs.append(EmbeddingRecord(r.request_id, r.user_id, int(it), tag, emb[i], r.ts, int(s)))
                        i += 1
        for tag in active:
            e = reg.entry(tag)
            if e.kind != "ue":
                continue
            pooled = mean_pool_history(run(e.source)).data
            cache = self._ue_cache.setdefault(tag, {})
            for b, r in enumerate(raws):
                hit = cache.get(r.user_id)
                if hit is None or r.hist_count - hit[1] >= max(1, e.refresh_events):
                    hit = (pooled[b].copy(), r.hist_count)
                    cache[r.user_id] = hit
                for it, s in zip(r.cand_items, r.cand_surface):
                    recs.append(EmbeddingRecord(r.request_id, r.user_id, int(it), tag, hit[0], r.ts, int(s)))
        return recs

    def log(self, raws: Sequence[RawRequest], impressed: Sequence[np.ndarray] | None = None) -> int:
        if impressed is not None:
            raws = [restrict(r, m) for r, m in zip(raws, impressed)]
        return self.store.append(self.records_for(raws))

    def flush(self) -> int:
        return self.store.flush()
