"""Target-aware sequence encoder.

History impressions and request targets are embedded into one unified
sequence (history first, then targets) and run through a stack of
single-head HSTU-style blocks. Each target sees the whole history and
itself, so its output depends only on (history, that target).
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from fmexpert import tensor as T
from fmexpert.tensor import Tensor

N_TIME_BUCKETS = 16
_MIX = np.uint64(0x9E3779B97F4A7C15)


class ContractError(ValueError):
    """Caller violated an operation's precondition."""


def hash_index(keys, buckets: int, salt: int = 0) -> np.ndarray:
    """Deterministic splitmix64-style hash of non-negative integer keys into [0, buckets)."""
    x = np.asarray(keys, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(salt) * _MIX + _MIX
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x % np.uint64(buckets)).astype(np.int64)


def age_bucket(age_seconds) -> np.ndarray:
    """Log-spaced recency bucket; 0 means "now" (targets)."""
    age = np.maximum(np.asarray(age_seconds, dtype=np.float64), 0.0)
    b = 1 + np.floor(np.log2(1.0 + age / 600.0)).astype(np.int64)
    return np.where(age <= 0, 0, np.minimum(b, N_TIME_BUCKETS - 1))


@dataclass(frozen=True)
class ItemFeatures:
    item_id: int
    surface_id: int
    time_bucket: int = 0
    action: int | None = None


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    n_layers: int = 2
    emb_dim: int | None = None
    f_hidden: int | None = None
    item_buckets: int = 4096
    ctx_buckets: int = 256
    n_actions: int = 5
    max_history: int = 32
    f_identity: bool = False
    prefix: str = "enc"

    @property
    def e(self) -> int:
        return self.emb_dim or self.d // 2

    @property
    def hidden(self) -> int:
        return self.f_hidden or self.d

    def block_names(self) -> list[str]:
        p = self.prefix
        names = [f"{p}.emb.item", f"{p}.emb.ctx", f"{p}.emb.action"]
        if not self.f_identity:
            names += [f"{p}.f.w1", f"{p}.f.b1", f"{p}.f.w2", f"{p}.f.b2"]
        for i in range(self.n_layers):
            names += [f"{p}.layer{i}.{m}" for m in ("wq", "wk", "wv", "wu", "wo")]
        return names


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p, d, e, h = cfg.prefix, cfg.d, cfg.e, cfg.hidden
    if cfg.f_identity and 2 * e != d:
        raise ContractError("identity f needs d == 2 * emb_dim")
    blocks = {
        f"{p}.emb.item": rng.normal(0, 0.1, (cfg.item_buckets, e)),
        f"{p}.emb.ctx": rng.normal(0, 0.1, (cfg.ctx_buckets, e)),
        f"{p}.emb.action": rng.normal(0, 0.1, (cfg.n_actions, d)),
    }
    if not cfg.f_identity:
        blocks[f"{p}.f.w1"] = T.init_normal(rng, 2 * e, h)
        blocks[f"{p}.f.b1"] = np.zeros((1, h))
        blocks[f"{p}.f.w2"] = T.init_normal(rng, h, d)
        blocks[f"{p}.f.b2"] = np.zeros((1, d))
    # scaled output projection keeps deep residual stacks near identity at init
    out_std = 1.0 / np.sqrt(d * max(1, cfg.n_layers))
    for i in range(cfg.n_layers):
        for m in ("wq", "wk", "wv", "wu"):
            blocks[f"{p}.layer{i}.{m}"] = T.init_normal(rng, d, d)
        blocks[f"{p}.layer{i}.wo"] = rng.normal(0, out_std, (d, d))
    return blocks


def _ctx_index(surface, bucket, cfg: EncoderConfig) -> np.ndarray:
    key = np.asarray(surface, dtype=np.int64) * N_TIME_BUCKETS + np.asarray(bucket, dtype=np.int64)
    return hash_index(key, cfg.ctx_buckets, salt=1)


def _f(item_rows: Tensor, ctx_rows: Tensor, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    x = T.concat_cols([item_rows, ctx_rows])
    if cfg.f_identity:
        return x
    p = cfg.prefix
    h = T.silu(T.add(T.matmul(x, w[f"{p}.f.w1"]), w[f"{p}.f.b1"]))
    return T.add(T.matmul(h, w[f"{p}.f.w2"]), w[f"{p}.f.b2"])


def embed_items(items: Sequence[ItemFeatures], w: Mapping[str, Tensor], cfg: EncoderConfig,
                with_action: bool) -> Tensor:
    p = cfg.prefix
    item_idx = hash_index([f.item_id for f in items], cfg.item_buckets)
    ctx_idx = _ctx_index([f.surface_id for f in items], [f.time_bucket for f in items], cfg)
    out = _f(T.take_rows(w[f"{p}.emb.item"], item_idx), T.take_rows(w[f"{p}.emb.ctx"], ctx_idx), w, cfg)
    if with_action:
        out = T.add(out, T.take_rows(w[f"{p}.emb.action"], [f.action for f in items]))
    return out


def embed_history_item(feat: ItemFeatures, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    if feat.action is None:
        raise ContractError("history impressions need an action")
    return embed_items([feat], w, cfg, with_action=True)


def embed_target_item(feat: ItemFeatures, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    if feat.action is not None:
        raise ContractError("targets carry no action")
    return embed_items([feat], w, cfg, with_action=False)


@dataclass
class UnifiedSequence:
    positions: Tensor  # (N + M, d): history rows then target rows
    n_history: int
    n_targets: int

    def __len__(self) -> int:
        return self.n_history + self.n_targets

    @property
    def attention_mask(self) -> np.ndarray:
        n, m = self.n_history, self.n_targets
        mask = np.zeros((n + m, n + m), dtype=bool)
        mask[:n, :n] = np.tril(np.ones((n, n), dtype=bool))
        mask[n:, :n] = True
        mask[n:, n:] = np.eye(m, dtype=bool)
        return mask


def _truncate(history: Sequence[ItemFeatures], cfg: EncoderConfig) -> list[ItemFeatures]:
    return list(history[-cfg.max_history:]) if cfg.max_history else []


def build_unified_sequence(history: Sequence[ItemFeatures], targets: Sequence[ItemFeatures],
                           w: Mapping[str, Tensor], cfg: EncoderConfig) -> UnifiedSequence:
    if not targets:
        raise ContractError("a request needs at least one target")
    hist = _truncate(history, cfg)
    if any(f.action is None for f in hist):
        raise ContractError("history impressions need an action")
    if any(f.action is not None for f in targets):
        raise ContractError("targets carry no action")
    parts = []
    if hist:
        parts.append(embed_items(hist, w, cfg, with_action=True))
    parts.append(embed_items(targets, w, cfg, with_action=False))
    pos = parts[0] if len(parts) == 1 else _stack_rows(parts)
    return UnifiedSequence(pos, len(hist), len(targets))


def _stack_rows(parts: Sequence[Tensor]) -> Tensor:
    # row concatenation expressed as a gather over a column-stacked matrix would
    # cost more; a dedicated tiny node is simpler
    data = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return T._node(data, tuple(parts), backward)


@dataclass
class SequenceBatch:
    """B requests padded to ``n_history`` history slots and ``n_targets`` target slots."""

    item_idx: np.ndarray  # (B, L) hashed item index
    ctx_idx: np.ndarray  # (B, L)
    action: np.ndarray  # (B, n_history), -1 on padded slots
    history_valid: np.ndarray  # (B, n_history) bool
    target_valid: np.ndarray  # (B, n_targets) bool
    n_history: int
    n_targets: int

    @property
    def size(self) -> int:
        return self.item_idx.shape[0]

    @property
    def length(self) -> int:
        return self.n_history + self.n_targets

    def target_rows(self) -> np.ndarray:
        """Flat row index of every valid target, request-major."""
        b, j = np.nonzero(self.target_valid)
        return b * self.length + self.n_history + j

    def history_rows(self) -> np.ndarray:
        b, i = np.nonzero(self.history_valid)
        return b * self.length + i

    @classmethod
    def from_arrays(cls, hist_items, hist_surface, hist_bucket, hist_action, hist_len,
                    tgt_items, tgt_surface, tgt_len, cfg: EncoderConfig) -> SequenceBatch:
        """Vectorised constructor; history arrays are (B, H) right-padded, targets (B, M)."""
        hist_items = np.asarray(hist_items, dtype=np.int64)
        B, H = hist_items.shape
        M = np.asarray(tgt_items).shape[1]
        hv = np.arange(H)[None, :] < np.asarray(hist_len)[:, None]
        tv = np.arange(M)[None, :] < np.asarray(tgt_len)[:, None]
        item = np.concatenate([hash_index(hist_items, cfg.item_buckets),
                               hash_index(tgt_items, cfg.item_buckets)], axis=1)
        ctx = np.concatenate([_ctx_index(hist_surface, hist_bucket, cfg),
                              _ctx_index(tgt_surface, np.zeros((B, M), np.int64), cfg)], axis=1)
        action = np.where(hv, np.asarray(hist_action, dtype=np.int64), -1)
        item[:, :H][~hv] = 0
        ctx[:, :H][~hv] = 0
        item[:, H:][~tv] = 0
        ctx[:, H:][~tv] = 0
        return cls(item, ctx, action, hv, tv, H, M)

    @classmethod
    def from_features(cls, histories: Sequence[Sequence[ItemFeatures]],
                      targets: Sequence[Sequence[ItemFeatures]], cfg: EncoderConfig,
                      n_targets: int | None = None) -> SequenceBatch:
        B = len(histories)
        H = cfg.max_history
        M = n_targets or max(len(t) for t in targets)
        hi = np.zeros((B, H), np.int64)
        hs = np.zeros((B, H), np.int64)
        hb = np.zeros((B, H), np.int64)
        ha = np.zeros((B, H), np.int64)
        hl = np.zeros(B, np.int64)
        ti = np.zeros((B, M), np.int64)
        ts = np.zeros((B, M), np.int64)
        tl = np.zeros(B, np.int64)
        for b, (hist, tg) in enumerate(zip(histories, targets)):
            if not tg:
                raise ContractError("a request needs at least one target")
            hist = _truncate(hist, cfg)
            for i, f in enumerate(hist):
                if f.action is None:
                    raise ContractError("history impressions need an action")
                hi[b, i], hs[b, i], hb[b, i], ha[b, i] = f.item_id, f.surface_id, f.time_bucket, f.action
            hl[b] = len(hist)
            for j, f in enumerate(tg):
                if f.action is not None:
                    raise ContractError("targets carry no action")
                ti[b, j], ts[b, j] = f.item_id, f.surface_id
            tl[b] = len(tg)
        return cls.from_arrays(hi, hs, hb, ha, hl, ti, ts, tl, cfg)


def embed_batch(batch: SequenceBatch, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Unified-sequence embeddings, shape (B * L, d)."""
    p = cfg.prefix
    x = _f(T.take_rows(w[f"{p}.emb.item"], batch.item_idx.reshape(-1)),
           T.take_rows(w[f"{p}.emb.ctx"], batch.ctx_idx.reshape(-1)), w, cfg)
    B, H, L = batch.size, batch.n_history, batch.length
    if H:
        rows = (np.arange(B)[:, None] * L + np.arange(H)[None, :])[batch.history_valid]
        act = batch.action[batch.history_valid]
        scatter = np.zeros((B * L, cfg.n_actions))
        scatter[rows, act] = 1.0
        # one-hot scatter as a matmul: exact, and target rows receive nothing
        x = T.add(x, T.matmul(Tensor(scatter), w[f"{p}.emb.action"]))
    return x


def run_layers(x: Tensor, batch: SequenceBatch, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    p = cfg.prefix
    for i in range(cfg.n_layers):
        lp = f"{p}.layer{i}"
        h = T.layer_norm(x)
        q = T.matmul(h, w[f"{lp}.wq"])
        k = T.matmul(h, w[f"{lp}.wk"])
        v = T.matmul(h, w[f"{lp}.wv"])
        u = T.matmul(h, w[f"{lp}.wu"])
        a = T.sequence_attention(q, k, v, batch.n_history, batch.history_valid)
        x = T.add(x, T.matmul(T.mul(a, T.silu(u)), w[f"{lp}.wo"]))
    return x


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B * L, d) final states at every slot
    targets: Tensor  # (n_valid_targets, d), request-major
    batch: SequenceBatch


def encode_batch(batch: SequenceBatch, w: Mapping[str, Tensor], cfg: EncoderConfig) -> EncoderOutput:
    hidden = run_layers(embed_batch(batch, w, cfg), batch, w, cfg)
    return EncoderOutput(hidden, T.take_rows(hidden, batch.target_rows()), batch)


def encode(seq: UnifiedSequence, w: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Encode one unified sequence; returns one row per target.

    History is padded to ``cfg.max_history`` slots, the same layout the batched
    and serving paths use, so all three agree bit for bit.
    """
    n, m, d = seq.n_history, seq.n_targets, cfg.d
    H = cfg.max_history
    if n > H:
        raise ContractError("history longer than max_history; build the sequence with this config")
    if n == H:
        x = seq.positions
    else:
        pad = Tensor(np.zeros((H - n, d)))
        parts = [] if n == 0 else [_slice_rows(seq.positions, 0, n)]
        parts += [pad, _slice_rows(seq.positions, n, n + m)]
        x = _stack_rows(parts)
    hv = np.zeros((1, H), dtype=bool)
    hv[0, :n] = True
    batch = SequenceBatch(np.zeros((1, H + m), np.int64), np.zeros((1, H + m), np.int64),
                          np.zeros((1, H), np.int64), hv, np.ones((1, m), bool), H, m)
    hidden = run_layers(x, batch, w, cfg)
    return T.take_rows(hidden, np.arange(H, H + m))


def _slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return T.take_rows(x, np.arange(start, stop))


def mean_pool_history(out: EncoderOutput) -> Tensor:
    """Target-independent user summary: mean of final states over valid history slots."""
    b = out.batch
    pool = np.zeros((b.size, b.size * b.length))
    counts = np.maximum(b.history_valid.sum(axis=1), 1)
    bi, i = np.nonzero(b.history_valid)
    pool[bi, bi * b.length + i] = 1.0 / counts[bi]
    return T.matmul(Tensor(pool), out.hidden)


def as_constants(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in arrays.items()}
