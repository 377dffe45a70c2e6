"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every quantity in the models (embedding tables, hidden states, logits) is a
``Tensor`` holding a 2-D numpy array. Batch and sequence axes are flattened
into rows at call sites; the only op that looks inside that layout is
``sequence_attention``, which reshapes rows back into sequences internally.

Matrix products route through ``_gemm`` so that each output row depends only
on the matching input row, whatever the row count. Serving relies on that for
bit-identical embeddings across different request compositions.
"""

from __future__ import annotations

import contextlib
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

PROB_CLIP = 1e-7


class DimensionError(ValueError):
    pass


class FlopMeter:
    """Analytic operation counter; ops add to every active meter."""

    def __init__(self) -> None:
        self.flops = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.flops += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_meters: list[FlopMeter] = []


@contextlib.contextmanager
def count_flops() -> Iterator[FlopMeter]:
    meter = FlopMeter()
    _meters.append(meter)
    try:
        yield meter
    finally:
        _meters.remove(meter)


def _count(op: str, n: int) -> None:
    for m in _meters:
        m.add(op, int(n))


def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Single-row products take a gemv path whose rounding differs from gemm;
    # transposed views take yet another path. Both break row independence.
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim == 2 and a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    if a.ndim == 3 and a.shape[1] == 1:
        return np.matmul(np.concatenate([a, a], axis=1), b)[:, :1]
    return np.matmul(a, b)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf reachable from here."""
        if grad is None:
            if self.shape != (1, 1):
                raise DimensionError("backward() without a seed gradient needs a 1x1 tensor")
            grad = np.ones((1, 1))
        order = _topological(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.shape == (1, 1):
        return "scalar"
    if b.rows == 1 and b.cols == a.cols:
        return "row"
    raise DimensionError(f"{op}: cannot broadcast {b.shape} onto {a.shape}")


def _reduce_like(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "row":
        return g.sum(axis=0, keepdims=True)
    return g.sum().reshape(1, 1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    _count("matmul", 2 * a.rows * a.cols * b.cols)
    out = _gemm(a.data, b.data)

    def backward(g):
        ga = _gemm(g, b.data.T) if a.requires_grad else None
        gb = _gemm(a.data.T, g) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    """``a + b`` where ``b`` matches ``a``, is a row vector, or is a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b, "add")
    _count("elementwise", a.data.size)
    out = a.data + b.data

    def backward(g):
        return g, _reduce_like(g, kind)

    return _node(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b, "mul")
    _count("elementwise", a.data.size)
    out = a.data * b.data

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = _reduce_like(g * a.data, kind) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    _count("elementwise", a.data.size)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form avoids overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    _count("elementwise", 4 * a.data.size)
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    _count("elementwise", 5 * a.data.size)
    x = a.data
    s = _sigmoid(x)
    out = x * s

    def backward(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _node(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardisation without affine parameters."""
    _count("elementwise", 8 * a.data.size)
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[1]

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).sum(axis=1, keepdims=True) / n
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(out, tuple(parts), backward)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows by integer index; the backward pass scatter-adds."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise IndexError(f"take_rows: index out of range for {a.rows} rows")
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    _count("elementwise", a.data.size)
    shape = a.data.shape
    return _node(a.data.sum().reshape(1, 1), (a,), lambda g: (np.full(shape, g[0, 0]),))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Element-wise binary cross-entropy of sigmoid(logits).

    Probabilities are clipped to [PROB_CLIP, 1 - PROB_CLIP] before the log, so
    the gradient vanishes where clipping is active.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce: labels {y.shape} vs logits {logits.shape}")
    _count("elementwise", 6 * y.size)
    p = _sigmoid(logits.data)
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    out = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)

    def backward(g):
        return (g * np.where(inside, p - y, 0.0),)

    return _node(out, (logits,), backward)


def sequence_attention(q: Tensor, k: Tensor, v: Tensor, n_history: int,
                       history_valid: np.ndarray) -> Tensor:
    """Masked scaled dot-product attention over a batch of unified sequences.

    Rows are laid out as ``B`` sequences of ``L = n_history + M`` positions:
    ``n_history`` history slots (valid ones first, see ``history_valid`` of
    shape (B, n_history)) followed by ``M`` target slots. History position i
    attends to valid history positions <= i; each target attends to every
    valid history position and to itself, never to another target.
    """
    d = q.cols
    if k.shape != q.shape or v.shape != q.shape:
        raise DimensionError("attention: q, k, v shapes differ")
    hv = np.asarray(history_valid, dtype=bool)
    B, H = hv.shape
    if H != n_history or q.rows % B:
        raise DimensionError("attention: history mask does not match row layout")
    L = q.rows // B
    M = L - H
    if M < 0:
        raise DimensionError("attention: fewer rows than history slots")
    c = 1.0 / np.sqrt(d)
    Q = q.data.reshape(B, L, d)
    K = k.data.reshape(B, L, d)
    V = v.data.reshape(B, L, d)
    Qh, Kh, Vh = Q[:, :H], K[:, :H], V[:, :H]
    Qt, Kt, Vt = Q[:, H:], K[:, H:], V[:, H:]
    KhT = np.ascontiguousarray(Kh.transpose(0, 2, 1))
    _count("attention", 4 * B * (H * H + M * H) * d + 2 * B * M * d)

    out = np.empty((B, L, d))
    if H:
        causal = np.tril(np.ones((H, H), dtype=bool))
        mask_hh = causal[None] & hv[:, None, :]
        # a padded slot has no valid key before it; let it see itself
        mask_hh |= np.eye(H, dtype=bool)[None] & ~hv[:, :, None]
        s_hh = np.where(mask_hh, _gemm(Qh, KhT) * c, -np.inf)
        s_hh -= s_hh.max(axis=2, keepdims=True)
        a_hh = np.exp(s_hh)
        a_hh /= a_hh.sum(axis=2, keepdims=True)
        out[:, :H] = _gemm(a_hh, Vh)
    if M:
        s_tt = (Qt * Kt).sum(axis=2, keepdims=True) * c
        if H:
            s_th = np.where(hv[:, None, :], _gemm(Qt, KhT) * c, -np.inf)
            top = np.maximum(s_th.max(axis=2, keepdims=True), s_tt)
            e_th = np.exp(s_th - top)
            e_tt = np.exp(s_tt - top)
            z = e_th.sum(axis=2, keepdims=True) + e_tt
            a_th, a_tt = e_th / z, e_tt / z
            out[:, H:] = _gemm(a_th, Vh) + a_tt * Vt
        else:
            a_th, a_tt = None, np.ones((B, M, 1))
            out[:, H:] = Vt

    def backward(g):
        G = g.reshape(B, L, d)
        dQ = np.zeros((B, L, d))
        dK = np.zeros((B, L, d))
        dV = np.zeros((B, L, d))
        if H:
            Gh = G[:, :H]
            dV[:, :H] += _gemm(a_hh.transpose(0, 2, 1), Gh)
            da = _gemm(Gh, Vh.transpose(0, 2, 1))
            ds = a_hh * (da - (da * a_hh).sum(axis=2, keepdims=True)) * c
            dQ[:, :H] += _gemm(ds, Kh)
            dK[:, :H] += _gemm(ds.transpose(0, 2, 1), Qh)
        if M:
            Gt = G[:, H:]
            dV[:, H:] += a_tt * Gt
            da_tt = (Gt * Vt).sum(axis=2, keepdims=True)
            if H:
                dV[:, :H] += _gemm(a_th.transpose(0, 2, 1), Gt)
                da_th = _gemm(Gt, Vh.transpose(0, 2, 1))
                inner = (da_th * a_th).sum(axis=2, keepdims=True) + da_tt * a_tt
                ds_th = a_th * (da_th - inner) * c
                ds_tt = a_tt * (da_tt - inner) * c
                dQ[:, H:] += _gemm(ds_th, Kh) + ds_tt * Kt
                dK[:, :H] += _gemm(ds_th.transpose(0, 2, 1), Qt)
                dK[:, H:] += ds_tt * Qt
            # with no history the target output is V itself; q, k get nothing
        return dQ.reshape(B * L, d), dK.reshape(B * L, d), dV.reshape(B * L, d)

    return _node(out.reshape(B * L, d), (q, k, v), backward)


class ParamSet(Mapping[str, Tensor]):
    """Named parameter blocks with monotone per-block update counters."""

    def __init__(self, blocks: Mapping[str, np.ndarray] | None = None,
                 counters: Mapping[str, int] | None = None, trainable: bool = True):
        self._blocks: dict[str, Tensor] = {}
        self.counters: dict[str, int] = {}
        for name, arr in (blocks or {}).items():
            self.add(name, arr, trainable=trainable)
        for name, c in (counters or {}).items():
            if name not in self._blocks:
                raise KeyError(name)
            self.counters[name] = int(c)

    def add(self, name: str, arr, trainable: bool = True) -> Tensor:
        if name in self._blocks:
            raise KeyError(f"duplicate block {name!r}")
        t = Tensor(np.array(arr, dtype=np.float64), requires_grad=trainable)
        self._blocks[name] = t
        self.counters[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._blocks[name]

    def __iter__(self):
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def array(self, name: str) -> np.ndarray:
        return self._blocks[name].data

    def set_array(self, name: str, arr: np.ndarray) -> None:
        cur = self._blocks[name]
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != cur.shape:
            raise DimensionError(f"{name}: shape {arr.shape} != {cur.shape}")
        cur.data = arr.copy()

    def n_params(self) -> int:
        return sum(t.data.size for t in self._blocks.values())

    def zero_grad(self) -> None:
        for t in self._blocks.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._blocks.items() if t.grad is not None}

    def subset(self, names: Iterable[str]) -> ParamSet:
        names = list(names)
        return ParamSet({n: self.array(n) for n in names},
                        {n: self.counters[n] for n in names})

    def copy(self) -> ParamSet:
        return self.subset(self._blocks)

    def snapshot(self) -> ParamSet:
        """Immutable copy: read-only arrays, no gradient tracking."""
        snap = ParamSet({n: t.data for n, t in self._blocks.items()}, self.counters,
                        trainable=False)
        for t in snap._blocks.values():
            t.data.flags.writeable = False
        return snap

    def equal(self, other: ParamSet) -> bool:
        return (list(self) == list(other)
                and all(np.array_equal(self.array(n), other.array(n)) for n in self))


@dataclass
class Adam:
    """Adam with per-block step counts; blocks without gradient are left alone."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    state: dict[str, tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> list[str]:
        b1, b2 = self.betas
        touched = []
        for name, g in grads.items():
            if g is None or not np.any(g):
                continue
            t = params[name]
            m, v, k = self.state.get(name, (np.zeros_like(t.data), np.zeros_like(t.data), 0))
            k += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** k)
            vhat = v / (1 - b2 ** k)
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.state[name] = (m, v, k)
            params.counters[name] += 1
            touched.append(name)
        return touched


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], opt: Adam) -> list[str]:
    return opt.step(params, grads)


def init_normal(rng: np.random.Generator, rows: int, cols: int, std: float | None = None) -> np.ndarray:
    if std is None:
        std = 1.0 / np.sqrt(rows)
    return rng.normal(0.0, std, size=(rows, cols))
