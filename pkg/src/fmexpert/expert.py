"""Lightweight per-surface expert consuming foundation-model embeddings.

Data flow per candidate: FM embedding -> FM Embedding Module (layer norm with
a learned affine, plus train-time noise and dropout); a one-layer encoder over
the short recent history gives the short-term representation; the FM Fusion
Module (two-layer perceptron) merges both; the Expert Fusion Module mixes the
result with surface features and feeds per-task heads.

Embedding inputs are named: ``"tae"`` (target-aware embedding) and ``"ue"``
(target-independent user embedding, the ablation baseline). An expert with no
embedding inputs is the no-FM baseline.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from fmexpert import tensor as T
from fmexpert.encoder import EncoderConfig, SequenceBatch, encode_batch, init_encoder
from fmexpert.foundation import LossReport, TaskSpec, masked_task_loss
from fmexpert.tensor import Adam, ParamSet, Tensor

FM_MODULE_PREFIXES = ("fm_embed.", "fm_fusion.")


class VersionMismatch(ValueError):
    pass


class RejectedRecord(ValueError):
    pass


class WarmStartError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    surface_id: int
    tasks: tuple[TaskSpec, ...]
    fm_version_selected: str | None = None
    short_encoder: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(d=16, n_layers=1, max_history=8, prefix="short"))
    embedding_inputs: tuple[str, ...] = ("tae",)
    fm_dim: int = 32
    fusion_hidden: int = 32
    fusion_out: int = 16
    expert_hidden: int = 32
    feature_dim: int = 4
    noise_std: float = 0.0
    dropout: float = 0.0
    ue_version: str | None = None

    def version_for(self, name: str) -> str | None:
        return self.ue_version if name == "ue" else self.fm_version_selected

    def without_fm(self) -> ExpertConfig:
        return replace(self, embedding_inputs=(), fm_version_selected=None, ue_version=None)

    def is_fm_block(self, name: str) -> bool:
        return name.startswith(FM_MODULE_PREFIXES)


_INPUT_STREAM = {"tae": 1, "ue": 2}


def _init_fm_modules(cfg: ExpertConfig, seed: int) -> dict[str, np.ndarray]:
    # every block group draws from its own stream, so configs that share a
    # block also share its initial value
    blocks = {}
    ds = cfg.short_encoder.d
    for name in cfg.embedding_inputs:
        rng = np.random.default_rng([seed, _INPUT_STREAM.get(name, 9)])
        blocks[f"fm_embed.{name}.gain"] = np.ones((1, cfg.fm_dim))
        blocks[f"fm_embed.{name}.bias"] = np.zeros((1, cfg.fm_dim))
        blocks[f"fm_fusion.w_{name}"] = T.init_normal(rng, cfg.fm_dim, cfg.fusion_hidden)
    rng = np.random.default_rng([seed, 3])
    blocks["fm_fusion.w_short"] = T.init_normal(rng, ds, cfg.fusion_hidden)
    blocks["fm_fusion.b1"] = np.zeros((1, cfg.fusion_hidden))
    blocks["fm_fusion.w2"] = T.init_normal(rng, cfg.fusion_hidden, cfg.fusion_out)
    blocks["fm_fusion.b2"] = np.zeros((1, cfg.fusion_out))
    return blocks


def init_expert(cfg: ExpertConfig, seed: int) -> ParamSet:
    blocks = init_encoder(cfg.short_encoder, np.random.default_rng([seed, 0]))
    blocks.update(_init_fm_modules(cfg, seed))
    rng = np.random.default_rng([seed, 4])
    n = len(cfg.tasks)
    blocks["expert_fusion.w_fused"] = T.init_normal(rng, cfg.fusion_out, cfg.expert_hidden)
    blocks["expert_fusion.w_feat"] = T.init_normal(rng, cfg.feature_dim, cfg.expert_hidden)
    blocks["expert_fusion.b"] = np.zeros((1, cfg.expert_hidden))
    blocks["heads.w"] = T.init_normal(rng, cfg.expert_hidden, n)
    blocks["heads.b"] = np.zeros((1, n))
    return ParamSet(blocks)


@dataclass
class ExpertInput:
    seq: SequenceBatch  # short history + candidates
    embeddings: dict[str, tuple[str | None, np.ndarray]]  # input name -> (version tag, (n, fm_dim))
    features: np.ndarray  # (n, feature_dim)
    labels: np.ndarray | None = None  # (n, n_tasks)
    delta: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.features.shape[0]


def fm_embedding_module(e, w: Mapping[str, Tensor], name: str, cfg: ExpertConfig,
                        training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    e = e if isinstance(e, Tensor) else Tensor(e)
    if not np.all(np.isfinite(e.data)):
        raise RejectedRecord("non-finite FM embedding")
    z = T.add(T.mul(T.layer_norm(e), w[f"fm_embed.{name}.gain"]), w[f"fm_embed.{name}.bias"])
    if training and (cfg.noise_std > 0 or cfg.dropout > 0):
        if rng is None:
            raise ValueError("training-mode noise needs an rng")
        if cfg.noise_std > 0:
            z = T.add(z, Tensor(rng.normal(0.0, cfg.noise_std, z.shape)))
        if cfg.dropout > 0:
            keep = (rng.random(z.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            z = T.mul(z, Tensor(keep))
    return z


def expert_forward(inp: ExpertInput, w: Mapping[str, Tensor], cfg: ExpertConfig,
                   training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Per-task logits, shape (n, n_tasks)."""
    pre = None
    for name in cfg.embedding_inputs:
        tag, e = inp.embeddings[name]
        want = cfg.version_for(name)
        if tag != want:
            raise VersionMismatch(f"{name} embeddings from version {tag!r}, expert pinned to {want!r}")
        z = fm_embedding_module(e, w, name, cfg, training, rng)
        c = T.matmul(z, w[f"fm_fusion.w_{name}"])
        pre = c if pre is None else T.add(pre, c)
    short = encode_batch(inp.seq, w, cfg.short_encoder).targets
    c = T.matmul(short, w["fm_fusion.w_short"])
    pre = c if pre is None else T.add(pre, c)
    h = T.silu(T.add(pre, w["fm_fusion.b1"]))
    fused = T.silu(T.add(T.matmul(h, w["fm_fusion.w2"]), w["fm_fusion.b2"]))
    g = T.add(T.matmul(fused, w["expert_fusion.w_fused"]),
              T.matmul(Tensor(inp.features), w["expert_fusion.w_feat"]))
    g = T.silu(T.add(g, w["expert_fusion.b"]))
    return T.add(T.matmul(g, w["heads.w"]), w["heads.b"])


def expert_predict(inp: ExpertInput, w: Mapping[str, Tensor], cfg: ExpertConfig) -> np.ndarray:
    return T._sigmoid(expert_forward(inp, w, cfg).data)


def expert_loss(logits: Tensor, inp: ExpertInput, cfg: ExpertConfig) -> tuple[Tensor | None, LossReport]:
    total, vals = masked_task_loss(logits, inp.labels, inp.delta, [t.weight for t in cfg.tasks])
    per = {t.name: v for t, v in zip(cfg.tasks, vals) if v is not None}
    skipped = [t.name for t, v in zip(cfg.tasks, vals) if v is None]
    return total, LossReport(total.item() if total is not None else 0.0, per, skipped)


def expert_train_step(inp: ExpertInput, w: ParamSet, opt: Adam, cfg: ExpertConfig,
                      rng: np.random.Generator | None = None) -> LossReport:
    w.zero_grad()
    logits = expert_forward(inp, w, cfg, training=True, rng=rng)
    loss, report = expert_loss(logits, inp, cfg)
    if not np.isfinite(report.total):
        report.aborted = True
        return report
    if loss is not None and loss.requires_grad:
        loss.backward()
        report.touched = opt.step(w, w.grads())
    w.zero_grad()
    return report


def warm_start(expert_w: ParamSet, donor: ParamSet, cfg: ExpertConfig, seed: int) -> ParamSet:
    """Copy every non-FM block from ``donor``; FM Embedding/Fusion blocks are re-initialised."""
    bad = []
    for name in expert_w:
        if cfg.is_fm_block(name):
            continue
        if name not in donor:
            bad.append(f"{name} (missing in donor)")
        elif donor.array(name).shape != expert_w.array(name).shape:
            bad.append(f"{name} (shape {donor.array(name).shape} != {expert_w.array(name).shape})")
    if bad:
        raise WarmStartError("cannot warm start: " + ", ".join(bad))
    fresh = _init_fm_modules(cfg, seed)
    out = ParamSet()
    for name in expert_w:
        if cfg.is_fm_block(name):
            out.add(name, fresh[name])
        else:
            out.add(name, donor.array(name))
            out.counters[name] = donor.counters[name]
    return out


def one_stage_config(cfg: ExpertConfig, encoder: EncoderConfig) -> ExpertConfig:
    """The one-stage baseline: FM pathway removed, short-term encoder enlarged to FM scale."""
    return replace(cfg.without_fm(), short_encoder=replace(encoder, prefix="short"))
