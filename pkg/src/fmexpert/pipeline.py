"""End-to-end run: generate -> stream-train FMs with periodic partial publishes
-> serve/log embeddings -> join -> train experts -> evaluate -> reports.

Simulated time advances in ticks of one publish period. Within a tick:

1. requests of the tick are served; the logging tier materializes embeddings
   of every impressed candidate under every active version from the current
   server snapshots, then flushes;
2. each FM trains on the requests whose join latency has elapsed (and that
   lie before the holdout boundary);
3. each FM publishes a partial delta that the tiers apply.

Requests in the burn-in period (negative time) train the FMs but are not
logged; experts and evaluation only see time >= 0.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import subprocess
import sys
import time
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fmexpert import checkpoint
from fmexpert import tensor as T
from fmexpert.config import RunConfig, to_dict
from fmexpert.encoder import EncoderConfig, as_constants
from fmexpert.evaluation import (MetricUndefined, NEResult, ne_diff_pct, significant, task_ne,
                                 transfer_ratio, write_report)
from fmexpert.expert import (ExpertConfig, ExpertInput, expert_forward, expert_predict, expert_train_step,
                             init_expert, one_stage_config, warm_start)
from fmexpert.foundation import (MAIN_TASKS, FMConfig, LabeledBatch, TaskSpec, export_inference_subgraph,
                                 fm_predict, fm_train_step, init_fm)
from fmexpert.hypercast import wire
from fmexpert.hypercast.logtier import EmbeddingStore, LogTier, restrict
from fmexpert.hypercast.registry import VersionEntry, VersionRegistry
from fmexpert.hypercast.sync import Publisher, ServerState, WeightDelta
from fmexpert.hypercast.tiers import Client
from fmexpert.stream import (DAY, EventLog, JoinStats, downsample_mask, generate, join, raw_batch, raw_requests,
                             request_batch, write_events)
from fmexpert.tensor import ParamSet

log = logging.getLogger("fmexpert.pipeline")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str, timings: dict | None = None) -> Iterator[None]:
    t = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, f"{type(e).__name__}: {e}") from e
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t


# --- FM bookkeeping --------------------------------------------------------------

@dataclass
class FMRun:
    tag: str
    cfg: FMConfig
    trainer: ParamSet
    opt: T.Adam
    publisher: Publisher
    cols: np.ndarray  # event-log label column of each FM task
    train_mask: np.ndarray | None
    steps: int = 0
    aborted: int = 0
    applied_at: dict[str, float] = field(default_factory=dict)
    max_staleness: float = 0.0


def task_specs(names: Sequence[str], scope: dict[str, int | None]) -> tuple[TaskSpec, ...]:
    return tuple(TaskSpec(n) if scope[n] is None else TaskSpec(n, "aux", frozenset({scope[n]})) for n in names)


def labeled_batch(ev: EventLog, reqs: Sequence[int], cfg: FMConfig, cols: np.ndarray,
                  mask: np.ndarray | None) -> LabeledBatch | None:
    seq, tg = request_batch(ev, reqs, cfg.encoder, mask)
    if not len(tg):
        return None
    lab = ev.labels[tg][:, cols]
    return LabeledBatch(seq, np.maximum(lab, 0).astype(np.float64), (lab >= 0).astype(np.float64),
                        ev.features[tg], ev.surface_id[tg])


def _batches(items: Sequence[int], size: int) -> Iterator[Sequence[int]]:
    for i in range(0, len(items), size):
        yield items[i:i + size]


# --- tier backends -------------------------------------------------------------------

class InProcessTiers:
    """Harness mode: the logging tier is an object in this process."""

    def __init__(self, store: EmbeddingStore):
        self.registry = VersionRegistry()
        self.logtier = LogTier(self.registry, store)
        self.store = store

    def register(self, tag: str, encoder: EncoderConfig, params: ParamSet | None, now: float,
                 kind: str = "tae", source: str | None = None, refresh_events: int = 0) -> None:
        server = ServerState(params, now) if params is not None else None
        self.registry.register(VersionEntry(tag, encoder, server, kind, source, refresh_events))

    def apply(self, tag: str, delta: WeightDelta) -> None:
        self.registry.entry(tag).server.apply(delta)

    def log(self, raws) -> int:
        return self.logtier.log(raws)

    def flush(self) -> None:
        self.logtier.flush()

    def close(self) -> EmbeddingStore:
        self.logtier.flush()
        return self.store


class RemoteTiers:
    """The logging tier runs as a separate process reached over the wire protocol."""

    def __init__(self, path: Path, batch_size: int, capacity: int | None, workdir: Path):
        cfg_path = workdir / "log-tier.json"
        cfg_path.write_text(json.dumps({"host": "127.0.0.1", "port": 0, "embedding_log": str(path),
                                        "batch_size": batch_size, "capacity": capacity}))
        self.path = path
        self.proc = subprocess.Popen([sys.executable, "-m", "fmexpert.hypercast.cli", "log-tier",
                                      "--config", str(cfg_path)], stdout=subprocess.PIPE, text=True)
        line = self.proc.stdout.readline().split()
        if len(line) != 3 or line[0] != "listening":
            self.proc.kill()
            raise RuntimeError("log tier failed to start")
        self.client = Client(line[1], int(line[2]), timeout=600)

    def register(self, tag, encoder, params, now, kind="tae", source=None, refresh_events=0) -> None:
        req = {"type": "ADMIN_REGISTER_VERSION", "version": tag, "kind": kind,
               "encoder": wire.encoder_to_dict(encoder), "now": now, "refresh_events": refresh_events}
        if params is not None:
            req["params"] = wire.params_to_wire({n: params.array(n) for n in params})
        if source is not None:
            req["source"] = source
        self.client.call(req)

    def apply(self, tag: str, delta: WeightDelta) -> None:
        self.client.call({"type": "ADMIN_APPLY_DELTA", "version": tag, "delta": wire.delta_to_wire(delta)})

    def log(self, raws) -> int:
        return self.client.call({"type": "LOG_EMBED", "requests": [wire.raw_to_wire(r) for r in raws]})["records"]

    def flush(self) -> None:
        self.client.call({"type": "LOG_FLUSH"})

    def close(self) -> EmbeddingStore:
        try:
            self.client.call({"type": "LOG_FLUSH"})
            self.client.call({"type": "HEALTH"})
            self.client.request({"type": "ADMIN_SHUTDOWN"})
        finally:
            self.client.close()
            try:
                self.proc.wait(timeout=30)
            except subprocess.TimeoutExpired:
                self.proc.kill()
        return EmbeddingStore.load(self.path)


# --- experts ---------------------------------------------------------------------------

def expert_config(cfg: RunConfig, surface: int, tasks: tuple[TaskSpec, ...], inputs: dict[str, str],
                  fm_dim: int) -> ExpertConfig:
    e = cfg.expert
    short = EncoderConfig(d=e.short_d, n_layers=e.short_layers, max_history=e.short_history, prefix="short")
    return ExpertConfig(
        surface_id=surface, tasks=tasks, fm_version_selected=inputs.get("tae"), short_encoder=short,
        embedding_inputs=tuple(n for n in ("tae", "ue") if n in inputs), fm_dim=fm_dim,
        fusion_hidden=e.fusion_hidden, fusion_out=e.fusion_out, expert_hidden=e.expert_hidden,
        feature_dim=cfg.stream.feature_dim, noise_std=e.noise_std, dropout=e.dropout, ue_version=inputs.get("ue"))


class ExpertData:
    """Builds expert inputs for one surface from the event log and the embedding store."""

    def __init__(self, ev: EventLog, store, surface: int, missing_join: str):
        self.ev = ev
        self.store = store
        self.missing_join = missing_join
        first = ev.req_start
        on = np.nonzero(ev.surface_id[first] == surface)[0]
        self.reqs = on[ev.ts[first[on]] >= 0]
        self.req_ts = ev.ts[first[self.reqs]]
        self.col = {n: i for i, n in enumerate(ev.task_names)}
        self.missing = 0

    def window(self, lo: float, hi: float) -> np.ndarray:
        return self.reqs[(self.req_ts >= lo) & (self.req_ts < hi)]

    def inputs(self, reqs: Sequence[int], cfg: ExpertConfig) -> ExpertInput | None:
        raws, evs = raw_requests(self.ev, reqs, cfg.short_encoder.max_history)
        names = cfg.embedding_inputs
        vecs: dict[str, list[np.ndarray]] = {n: [] for n in names}
        kept_raws, kept_ev = [], []
        for raw, ev in zip(raws, evs):
            keep = np.ones(len(ev), dtype=bool)
            rows = {n: [] for n in names}
            for j, e in enumerate(ev):
                got = self.store.get((int(self.ev.request_id[e]), int(self.ev.item_id[e])), {})
                for n in names:
                    v = got.get(cfg.version_for(n))
                    if v is None:
                        self.missing += 1
                        if self.missing_join == "skip":
                            keep[j] = False
                        v = np.zeros(cfg.fm_dim)
                    rows[n].append(v)
            if not keep.any():
                continue
            for n in names:
                vecs[n] += [v for v, k in zip(rows[n], keep) if k]
            if not keep.all():
                raw = restrict(raw, keep)
            kept_raws.append(raw)
            kept_ev.append(ev[keep])
        if not kept_raws:
            return None
        tg = np.concatenate(kept_ev)
        cols = [self.col[t.name] for t in cfg.tasks]
        lab = self.ev.labels[tg][:, cols]
        emb = {n: (cfg.version_for(n), np.array(vecs[n])) for n in names}
        return ExpertInput(raw_batch(kept_raws, cfg.short_encoder), emb, self.ev.features[tg],
                           np.maximum(lab, 0).astype(np.float64), (lab >= 0).astype(np.float64))


def train_expert(w: ParamSet, cfg: ExpertConfig, data: ExpertData, reqs: np.ndarray, lr: float,
                 batch: int, seed: int) -> dict:
    opt = T.Adam(lr=lr)
    rng = np.random.default_rng([seed, 5])
    steps = aborted = 0
    for chunk in _batches(reqs, batch):
        inp = data.inputs(chunk, cfg)
        if inp is None:
            continue
        rep = expert_train_step(inp, w, opt, cfg, rng)
        steps += 1
        aborted += rep.aborted
    return {"steps": steps, "aborted": aborted}


def eval_expert(w: ParamSet, cfg: ExpertConfig, data: ExpertData, reqs: np.ndarray,
                chunk: int = 256) -> dict[str, NEResult]:
    ys, ds, ps = [], [], []
    consts = as_constants({n: w.array(n) for n in w})
    for c in _batches(reqs, chunk):
        inp = data.inputs(c, cfg)
        if inp is None:
            continue
        ps.append(expert_predict(inp, consts, cfg))
        ys.append(inp.labels)
        ds.append(inp.delta)
    return task_ne(np.concatenate(ys), np.concatenate(ds), np.concatenate(ps), [t.name for t in cfg.tasks])


def eval_fm(run: FMRun, ev: EventLog, reqs: np.ndarray, chunk: int = 256) -> dict[str, NEResult]:
    ys, ds, ps = [], [], []
    consts = as_constants({n: run.trainer.array(n) for n in run.trainer})
    for c in _batches(reqs, chunk):
        b = labeled_batch(ev, c, run.cfg, run.cols, None)
        if b is None:
            continue
        ps.append(fm_predict(b, consts, run.cfg))
        ys.append(b.labels)
        ds.append(b.delta)
    return task_ne(np.concatenate(ys), np.concatenate(ds), np.concatenate(ps), [t.name for t in run.cfg.tasks])


# --- the run ------------------------------------------------------------------------------

@dataclass
class PipelineResult:
    out_dir: Path
    reports: dict[str, Path]
    timings: dict[str, float]
    events: EventLog | None = None
    store: EmbeddingStore | None = None
    fms: dict[str, FMRun] = field(default_factory=dict)


def _fm_plan(cfg: RunConfig) -> list[str]:
    plan = []
    if "transfer" in cfg.experiments:
        plan += ["fm-small", "fm-large"]
    if "ablation" in cfg.experiments and "fm-large" not in plan:
        plan.append("fm-large")
    if "generalization" in cfg.experiments:
        plan.append("fm-gen")
    return plan


def run_pipeline(cfg: RunConfig, out_dir: str | Path, harness_mode: bool = True,
                 keep: bool = False) -> PipelineResult:
    out = Path(out_dir)
    for sub in ("checkpoints", "logs", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    reports: dict[str, Path] = {}
    scfg = cfg.stream_config()
    scope = scfg.task_surface()
    span = scfg.days * DAY
    train_end = (1.0 - cfg.holdout_fraction) * span
    P, lat = cfg.sync.period, cfg.join_latency

    with stage("generate", timings):
        ev, _ = generate(scfg)
        if cfg.logging.write_events:
            write_events(out / "logs" / "events.jsonl", ev)
    col = {n: i for i, n in enumerate(ev.task_names)}

    with stage("setup", timings):
        fms: dict[str, FMRun] = {}
        g = cfg.generalization
        for i, tag in enumerate(_fm_plan(cfg)):
            if tag == "fm-gen":
                names = [n for n in ev.task_names
                         if n not in g.withheld and (scope[n] != g.surface or n == g.fm_aux_task)]
                enc = cfg.fm_small
                mask = downsample_mask(ev, {**cfg.downsample, g.surface: g.fm_downsample}, seed=cfg.seed)
            else:
                names = list(ev.task_names)
                enc = cfg.fm_small if tag == "fm-small" else cfg.fm_large
                mask = downsample_mask(ev, cfg.downsample, seed=cfg.seed) if cfg.downsample else None
            fcfg = FMConfig(enc, task_specs(names, scope), tuple(range(scfg.n_surfaces)), scfg.feature_dim)
            trainer = init_fm(fcfg, seed=cfg.seed * 1000 + i)
            pub = Publisher(trainer, cfg.sync.fraction, source=tag, names=fcfg.encoder.block_names())
            fms[tag] = FMRun(tag, fcfg, trainer, T.Adam(lr=cfg.fm_train.lr), pub,
                             np.array([col[n] for n in names]), mask)
        if "fm-gen" in fms:
            leaked = set(g.withheld) & {t.name for t in fms["fm-gen"].cfg.tasks}
            if leaked:
                raise StageError("setup", f"withheld tasks in FM task specs: {sorted(leaked)}")
        first = ev.req_start
        req_ts = ev.ts[first]
        t0 = math.floor(req_ts.min() / P) * P
        emb_path = out / "logs" / "embeddings.jsonl"
        store_path = emb_path if (cfg.logging.write_embeddings or not harness_mode) else None
        if store_path is not None and store_path.exists():
            store_path.unlink()
        if harness_mode:
            tiers = InProcessTiers(EmbeddingStore(store_path, cfg.logging.batch_size, cfg.logging.capacity))
        else:
            tiers = RemoteTiers(emb_path, cfg.logging.batch_size, cfg.logging.capacity, out / "logs")
        for tag, run in fms.items():
            tiers.register(tag, run.cfg.encoder, export_inference_subgraph(run.trainer, run.cfg), t0)
            run.applied_at = {n: t0 for n in run.publisher.names}
        if "ablation" in cfg.experiments:
            tiers.register("ue-large", fms["fm-large"].cfg.encoder, None, t0, kind="ue", source="fm-large",
                           refresh_events=cfg.ablation.ue_refresh_events)
        h_max = max(r.cfg.encoder.max_history for r in fms.values()) if fms else 0

    sync_rows = []
    try:
        with stage("stream", timings):
            n_req = len(first)
            srv = rel = 0
            now = t0
            while srv < n_req:
                now += P
                hi = int(np.searchsorted(req_ts, now, side="left"))
                served = [r for r in range(srv, hi) if req_ts[r] >= 0]
                if served:
                    for run in fms.values():
                        oldest = min(run.applied_at.values())
                        run.max_staleness = max(run.max_staleness, float(req_ts[hi - 1]) - oldest)
                    for chunk in _batches(served, 256):
                        raws, _ = raw_requests(ev, chunk, h_max)
                        tiers.log(raws)
                srv = hi
                tiers.flush()
                # release joined requests whose latency has elapsed
                rhi = int(np.searchsorted(req_ts + lat, now, side="right"))
                ready = [r for r in range(rel, rhi) if req_ts[r] < train_end]
                rel = rhi
                for run in fms.values():
                    for chunk in _batches(ready, cfg.fm_train.batch_requests):
                        b = labeled_batch(ev, chunk, run.cfg, run.cols, run.train_mask)
                        if b is None:
                            continue
                        rep = fm_train_step(b, run.trainer, run.opt, run.cfg)
                        run.steps += 1
                        run.aborted += rep.aborted
                    delta = run.publisher.publish(now)
                    tiers.apply(run.tag, delta)
                    for name in delta.names:
                        run.applied_at[name] = now
                    sync_rows.append({"version": run.tag, "sequence": delta.sequence, "time": now,
                                      "blocks": delta.names})
    finally:
        with stage("log-tier", timings):
            store = tiers.close()

    with stage("checkpoint", timings):
        write_report(out / "logs" / "sync.jsonl", sync_rows)
        for tag, run in fms.items():
            checkpoint.save(out / "checkpoints" / f"{tag}.ckpt", run.trainer)
            checkpoint.save(out / "checkpoints" / f"{tag}.pruned.ckpt", export_inference_subgraph(run.trainer, run.cfg))
        rows = []
        for tag, run in fms.items():
            bound = run.publisher.window * P
            rows.append({"version": tag, "fraction": cfg.sync.fraction, "period": P, "publishes": run.publisher.sequence,
                         "max_staleness": run.max_staleness, "bound": bound,
                         "within_bound": run.max_staleness <= bound, "train_steps": run.steps,
                         "aborted_steps": run.aborted})
        reports["sync"] = write_report(out / "reports" / "sync.jsonl", rows)

    with stage("join", timings):
        stats = JoinStats()
        live = np.nonzero(ev.ts >= 0)[0]
        violations = 0
        offsets = 0.0
        versions: dict[int, int] = {}
        n_ex = 0
        for ex in join(ev, store, lat, stats, indices=live):
            n_ex += 1
            offsets += ex.available_at - ex.ts
            if ex.history and ev.ts[list(ex.history)].max() >= ex.ts:
                violations += 1
            versions[len(ex.embeddings)] = versions.get(len(ex.embeddings), 0) + 1
        reports["join"] = write_report(out / "reports" / "join.jsonl", [{
            "examples": n_ex, "joined": stats.joined, "missing": stats.missing,
            "latency": lat, "mean_latency": offsets / max(1, n_ex), "history_violations": violations,
            "versions_per_example": {str(k): v for k, v in sorted(versions.items())},
            "records_per_version": store.counts()}])

    hold_lo = train_end
    with stage("fm-eval", timings):
        live_req = np.nonzero(req_ts >= 0)[0]
        hold = live_req[req_ts[live_req] >= hold_lo]
        rows = []
        fm_ne: dict[str, dict[int, dict[str, NEResult]]] = {}
        for tag, run in fms.items():
            fm_ne[tag] = {}
            for s in range(scfg.n_surfaces):
                reqs = hold[ev.surface_id[first[hold]] == s]
                res = eval_fm(run, ev, reqs)
                fm_ne[tag][s] = res
                rows += [{"version": tag, "surface": s, "task": r.task, "ne": r.ne, "n": r.n, "p": r.p}
                         for r in res.values()]
        reports["fm"] = write_report(out / "reports" / "fm.jsonl", rows)

    lr, bs, mj = cfg.expert.lr, cfg.expert.batch_requests, cfg.expert.missing_join

    def surface_tasks(s):
        return task_specs([*MAIN_TASKS, *[n for n in ev.task_names if scope[n] == s]], scope)

    def mean_ne(runs: list[dict[str, NEResult]], name: str) -> tuple[float, list[float]] | None:
        if not all(name in r for r in runs):
            return None
        vals = [r[name].ne for r in runs]
        return float(np.mean(vals)), vals

    if "transfer" in cfg.experiments:
        with stage("transfer", timings):
            tc = cfg.transfer
            data = ExpertData(ev, store, tc.surface, mj)
            tasks = surface_tasks(tc.surface)
            hold_reqs = data.window(hold_lo, span)
            donor_cfg = expert_config(cfg, tc.surface, tasks, {}, cfg.fm_small.d)
            ne_e: dict[str, list] = {"fm-small": [], "fm-large": []}
            init_ne: dict[str, list] = {"warm": [], "cold": []}
            for seed in tc.seeds:
                donor = init_expert(donor_cfg, seed)
                train_expert(donor, donor_cfg, data, data.window(0, tc.donor_fraction * span), lr, bs, seed)
                checkpoint.save(out / "checkpoints" / f"expert-donor.s{seed}.ckpt", donor, tag="none")
                for tag, d in (("fm-small", cfg.fm_small.d), ("fm-large", cfg.fm_large.d)):
                    ecfg = expert_config(cfg, tc.surface, tasks, {"tae": tag}, d)
                    w = warm_start(init_expert(ecfg, seed), donor, ecfg, seed)
                    if tag == "fm-small":
                        init_ne["warm"].append(eval_expert(w, ecfg, data, hold_reqs))
                        init_ne["cold"].append(eval_expert(init_expert(ecfg, seed), ecfg, data, hold_reqs))
                    train_expert(w, ecfg, data, data.window(tc.donor_fraction * span, train_end), lr, bs, seed)
                    checkpoint.save(out / "checkpoints" / f"expert-transfer-{tag}.s{seed}.ckpt", w, tag=tag)
                    ne_e[tag].append(eval_expert(w, ecfg, data, hold_reqs))
            rows = []
            f1, f2 = fm_ne["fm-small"][tc.surface], fm_ne["fm-large"][tc.surface]
            for t in tasks:
                n = t.name
                e1, e2 = mean_ne(ne_e["fm-small"], n), mean_ne(ne_e["fm-large"], n)
                if n not in f1 or n not in f2 or e1 is None or e2 is None:
                    continue
                a, b, c, d = f1[n].ne, f2[n].ne, e1[0], e2[0]
                try:
                    tr = transfer_ratio(a, b, c, d)
                except MetricUndefined:
                    tr = None
                fd, xd = ne_diff_pct(b, a), ne_diff_pct(d, c)
                warm, cold = mean_ne(init_ne["warm"], n), mean_ne(init_ne["cold"], n)
                rows.append({"surface": tc.surface, "task": n, "kind": t.kind, "seeds": list(tc.seeds),
                             "ne_fm_small": a, "ne_fm_large": b, "ne_expert_fm_small": c, "ne_expert_fm_large": d,
                             "ne_expert_fm_small_seeds": e1[1], "ne_expert_fm_large_seeds": e2[1],
                             "fm_diff_pct": fd, "expert_diff_pct": xd, "tr": tr,
                             "fm_diff_significant": significant(fd), "expert_diff_significant": significant(xd),
                             "warm_initial_ne": warm[0] if warm else None,
                             "cold_initial_ne": cold[0] if cold else None})
            reports["transfer"] = write_report(out / "reports" / "transfer.jsonl", rows)

    if "ablation" in cfg.experiments:
        with stage("ablation", timings):
            ac = cfg.ablation
            data = ExpertData(ev, store, ac.surface, mj)
            tasks = surface_tasks(ac.surface)
            variants = (("baseline", {}), ("+UE", {"ue": "ue-large"}), ("+TAE", {"tae": "fm-large"}),
                        ("+UE+TAE", {"tae": "fm-large", "ue": "ue-large"}))
            res: dict[str, list] = {}
            for seed in ac.seeds:
                for name, inputs in variants:
                    ecfg = expert_config(cfg, ac.surface, tasks, inputs, cfg.fm_large.d)
                    w = init_expert(ecfg, seed)
                    train_expert(w, ecfg, data, data.window(0, train_end), lr, bs, seed)
                    res.setdefault(name, []).append(eval_expert(w, ecfg, data, data.window(hold_lo, span)))
            rows = []
            for name, _ in variants:
                for t in tasks:
                    got, base = mean_ne(res[name], t.name), mean_ne(res["baseline"], t.name)
                    if got is None or base is None:
                        continue
                    dp = ne_diff_pct(got[0], base[0])
                    rows.append({"row": name, "surface": ac.surface, "task": t.name, "kind": t.kind,
                                 "seeds": list(ac.seeds), "ne": got[0], "ne_seeds": got[1],
                                 "diff_pct": dp, "significant": significant(dp)})
            reports["ablation"] = write_report(out / "reports" / "ablation.jsonl", rows)

    if "generalization" in cfg.experiments:
        with stage("generalization", timings):
            data = ExpertData(ev, store, g.surface, mj)
            tasks = task_specs(list(g.withheld), scope)
            per: dict[str, dict[str, list[float]]] = {t: {"baseline": [], "fm": []} for t in g.withheld}
            for seed in g.seeds:
                for name, inputs in (("baseline", {}), ("fm", {"tae": "fm-gen"})):
                    ecfg = expert_config(cfg, g.surface, tasks, inputs, cfg.fm_small.d)
                    w = init_expert(ecfg, seed)
                    train_expert(w, ecfg, data, data.window(0, train_end), lr, bs, seed)
                    r = eval_expert(w, ecfg, data, data.window(hold_lo, span))
                    for t in g.withheld:
                        per[t][name].append(r[t].ne)
            rows = []
            for t in g.withheld:
                diffs = [ne_diff_pct(f, b) for f, b in zip(per[t]["fm"], per[t]["baseline"])]
                mean = float(np.mean(diffs))
                rows.append({"surface": g.surface, "task": t, "seeds": list(g.seeds), "ne_baseline": per[t]["baseline"],
                             "ne_fm": per[t]["fm"], "diff_pct": diffs, "diff_pct_mean": mean,
                             "significant": significant(mean),
                             "in_fm_tasks": t in {x.name for x in fms["fm-gen"].cfg.tasks}})
            reports["generalization"] = write_report(out / "reports" / "generalization.jsonl", rows)

    with stage("compute", timings):
        reports["compute"] = write_report(out / "reports" / "compute.jsonl", [compute_budget(cfg, ev)])

    with stage("report", timings):
        summary = {"config": to_dict(cfg), "events": len(ev), "requests": ev.n_requests,
                   "reports": sorted(reports), "fm_versions": sorted(fms)}
        reports["summary"] = write_report(out / "reports" / "summary.jsonl", [summary])
        (out / "logs" / "timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True))
    return PipelineResult(out, reports, timings, ev if keep else None, store if keep else None,
                          fms if keep else {})


def compute_budget(cfg: RunConfig, ev: EventLog, n_requests: int = 64) -> dict:
    """Analytic forward FLOPs of the expert vs its one-stage counterpart on the same requests."""
    s = cfg.transfer.surface
    tasks = task_specs([*MAIN_TASKS, *[n for n, x in cfg.stream_config().task_surface().items() if x == s]],
                       cfg.stream_config().task_surface())
    ecfg = expert_config(cfg, s, tasks, {"tae": "fm"}, cfg.fm_large.d)
    base = one_stage_config(ecfg, cfg.fm_large)
    reqs = list(range(min(n_requests, ev.n_requests)))
    feats_ev = []
    costs = {}
    for name, c in (("expert", ecfg), ("one_stage", base)):
        raws, evs = raw_requests(ev, reqs, c.short_encoder.max_history)
        tg = np.concatenate(evs)
        feats_ev = tg
        emb = {"tae": ("fm", np.zeros((len(tg), c.fm_dim)))} if c.embedding_inputs else {}
        inp = ExpertInput(raw_batch(raws, c.short_encoder), emb, ev.features[tg])
        w = init_expert(c, 0)
        with T.count_flops() as meter:
            expert_forward(inp, as_constants({n: w.array(n) for n in w}), c)
        costs[name] = meter.flops
    return {"surface": s, "requests": len(reqs), "candidates": int(len(feats_ev)),
            "expert_flops": costs["expert"], "one_stage_flops": costs["one_stage"],
            "ratio": costs["expert"] / costs["one_stage"],
            "expert_short_encoder": {"d": ecfg.short_encoder.d, "n_layers": ecfg.short_encoder.n_layers,
                                     "max_history": ecfg.short_encoder.max_history},
            "one_stage_encoder": {"d": base.short_encoder.d, "n_layers": base.short_encoder.n_layers,
                                  "max_history": base.short_encoder.max_history}}
