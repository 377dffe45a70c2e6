"""Foundation model: encoder + multi-task heads + per-surface alignment modules."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from fmexpert import tensor as T
from fmexpert.encoder import EncoderConfig, SequenceBatch, encode_batch, init_encoder
from fmexpert.tensor import Adam, ParamSet, Tensor

MAIN_TASKS = ("like", "share", "video_complete", "vvd")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str = "main"
    surface_scope: frozenset[int] = frozenset()
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("main", "aux"):
            raise ConfigError(f"task {self.name}: kind must be main or aux")
        if not self.weight > 0:
            raise ConfigError(f"task {self.name}: weight must be positive")
        if self.kind == "main" and self.surface_scope:
            raise ConfigError(f"main task {self.name} must have universal scope")
        if self.kind == "aux" and len(self.surface_scope) != 1:
            raise ConfigError(f"aux task {self.name} needs exactly one surface in scope")

    @property
    def surface(self) -> int:
        return next(iter(self.surface_scope))


@dataclass(frozen=True)
class FMConfig:
    encoder: EncoderConfig
    tasks: tuple[TaskSpec, ...]
    surfaces: tuple[int, ...] = (0, 1, 2, 3)
    aux_feature_dim: int = 4
    align_hidden: int = 32

    @property
    def main_tasks(self) -> list[TaskSpec]:
        return [t for t in self.tasks if t.kind == "main"]

    def aux_tasks(self, surface: int | None = None) -> list[TaskSpec]:
        return [t for t in self.tasks if t.kind == "aux" and (surface is None or t.surface == surface)]

    def head_block_names(self) -> list[str]:
        names = ["head.main.w", "head.main.b"]
        for s in self.surfaces:
            if self.aux_tasks(s):
                names += [f"align.s{s}.{m}" for m in ("w1", "b1", "w2", "b2")]
        return names


def init_fm(cfg: FMConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    for t in cfg.aux_tasks():
        if t.surface not in cfg.surfaces:
            raise ConfigError(f"aux task {t.name} scoped to unknown surface {t.surface}")
    blocks = init_encoder(cfg.encoder, rng)
    d, S = cfg.encoder.d, len(cfg.main_tasks)
    blocks["head.main.w"] = T.init_normal(rng, d, S)
    blocks["head.main.b"] = np.zeros((1, S))
    for s in cfg.surfaces:
        n = len(cfg.aux_tasks(s))
        if not n:
            continue
        blocks[f"align.s{s}.w1"] = T.init_normal(rng, d + cfg.aux_feature_dim, cfg.align_hidden)
        blocks[f"align.s{s}.b1"] = np.zeros((1, cfg.align_hidden))
        blocks[f"align.s{s}.w2"] = T.init_normal(rng, cfg.align_hidden, n)
        blocks[f"align.s{s}.b2"] = np.zeros((1, n))
    return ParamSet(blocks)


@dataclass
class LabeledBatch:
    """Requests plus one row of supervision per valid target (request-major)."""

    seq: SequenceBatch
    labels: np.ndarray  # (n, n_tasks) in cfg.tasks order; ignored where delta == 0
    delta: np.ndarray  # (n, n_tasks) sample-space indicator
    aux_features: np.ndarray  # (n, aux_feature_dim)
    surface: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def select(self, rows: np.ndarray) -> LabeledBatch:
        """Sub-batch of target rows (keeps the request tensors, masks out other targets)."""
        keep = np.zeros(self.n, dtype=bool)
        keep[rows] = True
        tv = self.seq.target_valid.copy()
        tv[tv] = keep
        seq = SequenceBatch(self.seq.item_idx, self.seq.ctx_idx, self.seq.action,
                            self.seq.history_valid, tv, self.seq.n_history, self.seq.n_targets)
        return LabeledBatch(seq, self.labels[keep], self.delta[keep], self.aux_features[keep],
                            self.surface[keep])


@dataclass
class FMOutput:
    embedding: Tensor  # (n, d)
    main_logits: Tensor  # (n, S)
    aux_logits: dict[int, tuple[np.ndarray, Tensor]] = field(default_factory=dict)  # surface -> (rows, logits)


def alignment(emb: Tensor, aux: np.ndarray, w: Mapping[str, Tensor], s: int) -> Tensor:
    x = T.concat_cols([emb, Tensor(aux)])
    h = T.silu(T.add(T.matmul(x, w[f"align.s{s}.w1"]), w[f"align.s{s}.b1"]))
    return T.add(T.matmul(h, w[f"align.s{s}.w2"]), w[f"align.s{s}.b2"])


def fm_forward(batch: LabeledBatch, w: Mapping[str, Tensor], cfg: FMConfig) -> FMOutput:
    unknown = set(np.unique(batch.surface).tolist()) - set(cfg.surfaces)
    if unknown:
        raise ConfigError(f"unknown surface id(s) {sorted(unknown)}")
    emb = encode_batch(batch.seq, w, cfg.encoder).targets
    main = T.add(T.matmul(emb, w["head.main.w"]), w["head.main.b"])
    out = FMOutput(emb, main)
    for s in cfg.surfaces:
        if not cfg.aux_tasks(s):
            continue
        rows = np.nonzero(batch.surface == s)[0]
        if rows.size:
            out.aux_logits[s] = (rows, alignment(T.take_rows(emb, rows), batch.aux_features[rows], w, s))
    return out


@dataclass
class LossReport:
    total: float
    per_task: dict[str, float]
    skipped: list[str]
    aborted: bool = False
    touched: list[str] = field(default_factory=list)


def masked_task_loss(logits: Tensor, labels: np.ndarray, delta: np.ndarray,
                     weights: Sequence[float]) -> tuple[Tensor | None, list[float | None]]:
    """Weighted sum over columns of sum_i delta_i * bce_i / sum_i delta_i.

    Columns with no valid sample contribute nothing and are reported as None.
    """
    delta = np.asarray(delta, dtype=np.float64)
    denom = delta.sum(axis=0)
    ok = denom > 0
    if not ok.any():
        return None, [None] * delta.shape[1]
    y = np.where(delta > 0, labels, 0.0)
    bce = T.bce_with_logits(logits, y)
    coef = np.where(ok, np.asarray(weights, dtype=np.float64) / np.where(ok, denom, 1.0), 0.0)
    total = T.sum_all(T.mul(bce, Tensor(delta * coef[None, :])))
    per = (bce.data * delta).sum(axis=0)
    values = [float(per[j] / denom[j]) if ok[j] else None for j in range(delta.shape[1])]
    return total, values


def fm_loss(out: FMOutput, batch: LabeledBatch, cfg: FMConfig) -> tuple[Tensor, LossReport]:
    names = [t.name for t in cfg.tasks]
    col = {n: i for i, n in enumerate(names)}
    per_task: dict[str, float] = {}
    skipped: list[str] = []
    terms: list[Tensor] = []

    mains = cfg.main_tasks
    idx = [col[t.name] for t in mains]
    total, vals = masked_task_loss(out.main_logits, batch.labels[:, idx], batch.delta[:, idx],
                                   [t.weight for t in mains])
    if total is not None:
        terms.append(total)
    for t, v in zip(mains, vals):
        per_task[t.name] = v if v is not None else math.nan
        if v is None:
            skipped.append(t.name)

    for s in cfg.surfaces:
        aux = cfg.aux_tasks(s)
        if not aux:
            continue
        if s not in out.aux_logits:
            skipped += [t.name for t in aux]
            continue
        rows, logits = out.aux_logits[s]
        idx = [col[t.name] for t in aux]
        # the normaliser counts valid samples over the whole batch; rows from
        # other surfaces have delta 0 for these tasks, so restricting is exact
        total, vals = masked_task_loss(logits, batch.labels[rows][:, idx], batch.delta[rows][:, idx],
                                       [t.weight for t in aux])
        if total is not None:
            terms.append(total)
        for t, v in zip(aux, vals):
            if v is None:
                skipped.append(t.name)
            else:
                per_task[t.name] = v
    if not terms:
        return Tensor(np.zeros((1, 1))), LossReport(0.0, per_task, skipped)
    loss = terms[0]
    for t in terms[1:]:
        loss = T.add(loss, t)
    return loss, LossReport(loss.item(), per_task, skipped)


def fm_train_step(batch: LabeledBatch, w: ParamSet, opt: Adam, cfg: FMConfig) -> LossReport:
    w.zero_grad()
    out = fm_forward(batch, w, cfg)
    loss, report = fm_loss(out, batch, cfg)
    if not np.isfinite(report.total):
        report.aborted = True
        return report
    if loss.requires_grad:
        loss.backward()
        report.touched = opt.step(w, w.grads())
    w.zero_grad()
    return report


def export_inference_subgraph(w: ParamSet, cfg: FMConfig) -> ParamSet:
    """Only the blocks needed to compute target-aware embeddings."""
    return w.subset(cfg.encoder.block_names())


def fm_embed(seq: SequenceBatch, w: Mapping[str, Tensor], cfg: FMConfig) -> np.ndarray:
    return encode_batch(seq, w, cfg.encoder).targets.data


def fm_predict(batch: LabeledBatch, w: Mapping[str, Tensor], cfg: FMConfig) -> np.ndarray:
    """Probabilities for every task column (main from heads, aux from alignment; NaN elsewhere)."""
    out = fm_forward(batch, w, cfg)
    names = [t.name for t in cfg.tasks]
    col = {n: i for i, n in enumerate(names)}
    probs = np.full((batch.n, len(names)), np.nan)
    mains = cfg.main_tasks
    probs[:, [col[t.name] for t in mains]] = T._sigmoid(out.main_logits.data)
    for s, (rows, logits) in out.aux_logits.items():
        idx = [col[t.name] for t in cfg.aux_tasks(s)]
        probs[np.ix_(rows, idx)] = T._sigmoid(logits.data)
    return probs
