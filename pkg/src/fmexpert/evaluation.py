"""Normalized entropy, transfer ratio and report files."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_CLIP = 1e-7
TAU_DENOM = 1e-4
SIGNIFICANT_PCT = 0.05  # NE diffs at or beyond this many percent count as significant


class MetricUndefined(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class NEResult:
    task: str
    ne: float
    n: int
    p: float


def normalized_entropy(labels, probs, task: str = "") -> NEResult:
    """Mean binary cross-entropy divided by the entropy of the label base rate.

    The constant predictor at the base rate scores exactly 1; lower is better.
    """
    y = np.asarray(labels, dtype=np.float64).ravel()
    q = np.asarray(probs, dtype=np.float64).ravel()
    if y.size == 0 or y.size != q.size:
        raise ValueError("labels and probs must be non-empty and the same length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if np.any(np.isnan(q)):
        raise ValueError("probabilities contain NaN")
    n = y.size
    p = float(y.sum()) / n
    if p == 0.0 or p == 1.0:
        raise MetricUndefined("NE_UNDEFINED", f"task {task!r}: labels are all {'positive' if p else 'negative'}")
    q = np.clip(q, PROB_CLIP, 1.0 - PROB_CLIP)
    ce = -np.mean(y * np.log(q) + (1.0 - y) * np.log1p(-q))
    h = -(p * math.log(p) + (1.0 - p) * math.log1p(-p))
    return NEResult(task, float(ce / h), n, p)


def ne_diff_pct(ne: float, ne_base: float) -> float:
    """Relative NE change in percent; negative means better than the base."""
    return 100.0 * (ne - ne_base) / ne_base


def significant(diff_pct: float) -> bool:
    return abs(diff_pct) >= SIGNIFICANT_PCT


def transfer_ratio(ne_fm1: float, ne_fm2: float, ne_e1: float, ne_e2: float, tau: float = TAU_DENOM) -> float:
    """(NE(Expert_FM1) - NE(Expert_FM2)) / (NE(FM1) - NE(FM2))."""
    denom = ne_fm1 - ne_fm2
    if not abs(denom) > tau:
        raise MetricUndefined("TR_UNDEFINED", f"FM NE difference {denom:.3g} within {tau:g} of zero")
    return (ne_e1 - ne_e2) / denom


def transfer_ratio_from_diffs(fm_diff: float, expert_diff: float, tau: float = 0.0) -> float:
    """TR from already-computed differences (any common unit, e.g. percent)."""
    if not abs(fm_diff) > tau:
        raise MetricUndefined("TR_UNDEFINED", "FM difference is zero")
    return expert_diff / fm_diff


def task_ne(labels: np.ndarray, delta: np.ndarray, probs: np.ndarray, names: Iterable[str]) -> dict[str, NEResult]:
    """NE per task column over rows where the task is defined; undefined tasks are omitted."""
    out = {}
    for j, name in enumerate(names):
        m = delta[:, j] > 0
        if not m.any():
            continue
        try:
            out[name] = normalized_entropy(labels[m, j], probs[m, j], name)
        except MetricUndefined:
            continue
    return out


def write_report(path: str | Path, rows: Iterable[Mapping]) -> Path:
    """One JSON object per line, keys sorted, so equal inputs give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(json.dumps(_plain(r), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"
                   for r in rows)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def read_report(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _plain(x):
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return None if not math.isfinite(v) else v
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x
