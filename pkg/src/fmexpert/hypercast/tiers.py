"""Inference tiers and their request dispatch.

Every tier is a plain object with ``handle(request) -> response`` so the
same code runs in-process (harness mode) or behind ``TierServer`` over the
framed wire protocol. Responses carry ``status`` "OK" or "ERROR" plus an
error ``code``.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout

import numpy as np

from fmexpert.encoder import N_TIME_BUCKETS, as_constants, encode_batch, mean_pool_history
from fmexpert.expert import ExpertConfig, ExpertInput, RejectedRecord, VersionMismatch, expert_predict
from fmexpert.hypercast import wire
from fmexpert.hypercast.logtier import Backpressure, DuplicateRecord, LogTier
from fmexpert.hypercast.registry import VersionEntry, VersionInactive, VersionRegistry
from fmexpert.hypercast.sync import ServerState, StaleDelta, UnknownBlock
from fmexpert.stream import RawRequest, raw_batch
from fmexpert.tensor import ParamSet


class TierError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


_CODES = (
    (wire.BadRequest, "BAD_REQUEST"),
    (VersionInactive, "VERSION_INACTIVE"),
    (VersionMismatch, "VERSION_MISMATCH"),
    (StaleDelta, "STALE_DELTA"),
    (UnknownBlock, "UNKNOWN_BLOCK"),
    (Backpressure, "BACKPRESSURE"),
    (DuplicateRecord, "DUPLICATE"),
    (RejectedRecord, "REJECTED_RECORD"),
)


def error(code: str, message: str) -> dict:
    return {"status": "ERROR", "code": code, "message": message}


def _validate(raws: Sequence[RawRequest], n_actions: int = 5) -> None:
    for r in raws:
        if len(r.hist_action) and (r.hist_action.max() >= n_actions or r.hist_bucket.max() >= N_TIME_BUCKETS):
            raise wire.BadRequest("history action or time bucket out of range")


class Tier:
    """Shared dispatch: HEALTH, ADMIN_* and typed error mapping."""

    name = "tier"

    def __init__(self):
        self.shutdown_requested = threading.Event()

    def handlers(self) -> dict[str, Callable[[dict], dict]]:
        return {}

    def health(self) -> dict:
        return {"status": "OK", "tier": self.name}

    def handle(self, req) -> dict:
        if not isinstance(req, dict) or not isinstance(req.get("type"), str):
            return error("BAD_REQUEST", "request needs a string 'type'")
        kind = req["type"]
        if kind == "HEALTH":
            return self.health()
        if kind == "ADMIN_SHUTDOWN":
            self.shutdown_requested.set()
            return {"status": "OK"}
        fn = self.handlers().get(kind)
        if fn is None:
            return error("BAD_REQUEST", f"unsupported request type {kind!r} on {self.name} tier")
        try:
            return fn(req)
        except TierError as e:
            return error(e.code, e.message)
        except Exception as e:  # typed failures become codes; anything else is internal
            for cls, code in _CODES:
                if isinstance(e, cls):
                    return error(code, str(e))
            if isinstance(e, (KeyError, TypeError, ValueError)):
                return error("BAD_REQUEST", str(e))
            return error("INTERNAL", f"{type(e).__name__}: {e}")


class RegistryTier(Tier):
    """A tier that holds FM versions and accepts weight deltas."""

    def __init__(self, registry: VersionRegistry | None = None):
        super().__init__()
        self.registry = registry if registry is not None else VersionRegistry()

    def handlers(self):
        return {"ADMIN_APPLY_DELTA": self._apply, "ADMIN_REGISTER_VERSION": self._register}

    def health(self) -> dict:
        versions = {}
        for tag in self.registry.active():
            e = self.registry.entry(tag)
            if e.server is not None:
                snap = e.server.snapshot()
                versions[tag] = {"kind": e.kind, "sequence": snap.sequence, "checksum": snap.checksum}
            else:
                versions[tag] = {"kind": e.kind, "source": e.source}
        return {"status": "OK", "tier": self.name, "primary": self.registry.primary, "versions": versions}

    def _apply(self, req) -> dict:
        tag = req.get("version")
        if tag not in self.registry:
            raise VersionInactive(f"version {tag!r} unknown")
        e = self.registry.entry(tag)
        if e.server is None:
            raise wire.BadRequest(f"version {tag!r} has no weights of its own")
        snap = e.server.apply(wire.delta_from_wire(req["delta"]))
        return {"status": "OK", "version": tag, "sequence": snap.sequence, "checksum": snap.checksum}

    def _register(self, req) -> dict:
        tag = req.get("version")
        if not isinstance(tag, str):
            raise wire.BadRequest("version tag required")
        if "params" not in req and "encoder" not in req:
            # activation toggle of an existing version
            if tag not in self.registry:
                raise VersionInactive(f"version {tag!r} unknown")
            self.registry.set_active(tag, bool(req.get("active", True)))
            return {"status": "OK", "version": tag, "active": bool(req.get("active", True))}
        kind = req.get("kind", "tae")
        server = ServerState(wire.params_from_wire(req["params"]), float(req.get("now", 0.0))) \
            if kind == "tae" else None
        entry = VersionEntry(tag, wire.encoder_from_dict(req["encoder"]), server, kind,
                             req.get("source"), int(req.get("refresh_events", 0)), bool(req.get("active", True)))
        self.register_entry(entry, bool(req.get("primary", False)))
        return {"status": "OK", "version": tag, "active": entry.active}

    def register_entry(self, entry: VersionEntry, primary: bool = False) -> None:
        self.registry.register(entry, primary)


class FMTier(RegistryTier):
    """Online FM serving: target-aware embeddings for ranking candidates."""

    name = "fm"

    def __init__(self, registry: VersionRegistry | None = None):
        super().__init__(registry)
        self.calls = 0

    def handlers(self):
        h = super().handlers()
        h["FM_EMBED"] = self._embed
        return h

    def embed(self, raws: Sequence[RawRequest], version: str | None = None) -> tuple[str, str, np.ndarray]:
        """(version tag, snapshot checksum, one row per candidate request-major)."""
        self.calls += 1
        e = self.registry.resolve(version)
        _validate(raws, e.encoder.n_actions)
        snap = self.registry.server_for(e.tag).snapshot()
        enc = e.encoder if e.kind == "tae" else self.registry.entry(e.source).encoder
        out = encode_batch(raw_batch(raws, enc), as_constants(snap.blocks), enc)
        if e.kind == "tae":
            return e.tag, snap.checksum, out.targets.data
        pooled = mean_pool_history(out).data
        reps = np.array([r.n_candidates for r in raws])
        return e.tag, snap.checksum, np.repeat(pooled, reps, axis=0)

    def _embed(self, req) -> dict:
        batched = "requests" in req
        items = req["requests"] if batched else [req]
        if not isinstance(items, list) or not items:
            raise wire.BadRequest("requests must be a non-empty list")
        raws = [wire.raw_from_wire(r) for r in items]
        tag, cs, emb = self.embed(raws, req.get("version"))
        rows = [wire.vec_to_hex(v) for v in emb]
        resp = {"status": "OK", "version": tag, "checksum": cs}
        if batched:
            out, i = [], 0
            for r in raws:
                out.append(rows[i:i + r.n_candidates])
                i += r.n_candidates
            resp["embeddings"] = out
        else:
            resp["embeddings"] = rows
        return resp


class LoggingTier(RegistryTier):
    """Offline FM logging tier behind the wire protocol."""

    name = "log"

    def __init__(self, log: LogTier):
        super().__init__(log.registry)
        self.log = log

    def handlers(self):
        h = super().handlers()
        h["LOG_EMBED"] = self._log
        h["LOG_FLUSH"] = lambda req: {"status": "OK", "flushed": self.log.flush()}
        return h

    def health(self) -> dict:
        h = super().health()
        h["records"] = self.log.store.counts()
        h["pending"] = self.log.store.pending
        return h

    def _log(self, req) -> dict:
        items = req.get("requests")
        if not isinstance(items, list):
            raise wire.BadRequest("requests must be a list")
        raws = [wire.raw_from_wire(r) for r in items]
        for r in raws:
            _validate([r])
        masks = None
        if any("impressed" in r for r in items):
            masks = [np.asarray(r.get("impressed", [True] * raw.n_candidates), dtype=bool)
                     for r, raw in zip(items, raws)]
        n = self.log.log(raws, masks)
        return {"status": "OK", "records": n, "checksums": dict(sorted(self.log.last_checksums.items()))}


FMFetch = Callable[[Sequence[RawRequest], str | None], tuple[str, str, np.ndarray]]


class ExpertTier(Tier):
    """Online expert serving.

    With a fetch directive the FM call and surface-feature assembly are
    submitted together and awaited together, so the added critical-path
    latency is the slower of the two, not their sum.
    """

    name = "expert"

    def __init__(self, weights: ParamSet, cfg: ExpertConfig, fm_fetch: FMFetch | None = None,
                 feature_source: Callable[[RawRequest, object], np.ndarray] | None = None,
                 fm_timeout: float = 5.0, on_timeout: str = "fail"):
        super().__init__()
        if on_timeout not in ("fail", "zero"):
            raise ValueError("on_timeout must be 'fail' or 'zero'")
        self.weights = weights.snapshot()
        self.cfg = cfg
        self.fm_fetch = fm_fetch
        self.feature_source = feature_source or (lambda raw, feats: np.asarray(feats, dtype=np.float64))
        self.fm_timeout = fm_timeout
        self.on_timeout = on_timeout
        self.fm_calls = 0
        self._pool = ThreadPoolExecutor(max_workers=4)

    def handlers(self):
        return {"EXPERT_PREDICT": self._predict}

    def health(self) -> dict:
        return {"status": "OK", "tier": self.name, "surface": self.cfg.surface_id,
                "fm_version": self.cfg.fm_version_selected, "tasks": [t.name for t in self.cfg.tasks]}

    def _fetch(self, raw: RawRequest, version: str | None) -> tuple[str, np.ndarray]:
        self.fm_calls += 1
        tag, _, emb = self.fm_fetch([raw], version)
        return tag, emb

    def predict(self, raw: RawRequest, features, embeddings: Mapping[str, tuple[str, np.ndarray]] | None = None,
                fetch: bool = False) -> np.ndarray:
        embeddings = dict(embeddings or {})
        need = [n for n in self.cfg.embedding_inputs if n not in embeddings]
        if need and not fetch:
            raise wire.BadRequest(f"missing embeddings {need} and no fetch directive")
        if need and self.fm_fetch is None:
            raise TierError("FM_UNAVAILABLE", "no FM tier configured for fetches")
        futs = {n: self._pool.submit(self._fetch, raw, self.cfg.version_for(n)) for n in need}
        feat_fut = self._pool.submit(self.feature_source, raw, features)
        for n, f in futs.items():
            try:
                embeddings[n] = f.result(timeout=self.fm_timeout)
            except FutureTimeout:
                if self.on_timeout == "fail":
                    raise TierError("FM_TIMEOUT", f"FM tier did not answer within {self.fm_timeout}s") from None
                embeddings[n] = (self.cfg.version_for(n), np.zeros((raw.n_candidates, self.cfg.fm_dim)))
        feats = np.atleast_2d(feat_fut.result())
        if feats.shape != (raw.n_candidates, self.cfg.feature_dim):
            raise wire.BadRequest(f"features must be ({raw.n_candidates}, {self.cfg.feature_dim})")
        seq = raw_batch([raw], self.cfg.short_encoder)
        inp = ExpertInput(seq, {n: embeddings[n] for n in self.cfg.embedding_inputs}, feats)
        return expert_predict(inp, as_constants({n: self.weights.array(n) for n in self.weights}), self.cfg)

    def _predict(self, req) -> dict:
        raw = wire.raw_from_wire(req)
        _validate([raw], self.cfg.short_encoder.n_actions)
        given = {}
        for name, obj in (req.get("embeddings") or {}).items():
            vecs = np.array([wire.hex_to_vec(h) for h in obj["vectors"]])
            given[name] = (obj.get("version"), vecs)
        probs = self.predict(raw, req.get("features"), given, bool(req.get("fetch", False)))
        return {"status": "OK", "tasks": [t.name for t in self.cfg.tasks],
                "probs": [[float(x) for x in row] for row in probs]}

    def close(self) -> None:
        self._pool.shutdown(wait=False)


# --- transport ---------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        tier: Tier = self.server.tier  # type: ignore[attr-defined]
        while True:
            try:
                req = wire.recv_frame(self.request)
            except wire.FrameError as e:
                try:
                    wire.send_frame(self.request, error("BAD_REQUEST", str(e)))
                except OSError:
                    pass
                return
            except OSError:
                return
            if req is None:
                return
            resp = tier.handle(req)
            try:
                wire.send_frame(self.request, resp)
            except OSError:
                return
            if tier.shutdown_requested.is_set():
                threading.Thread(target=self.server.shutdown, daemon=True).start()
                return


class TierServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server: one handler thread per connection, frames in and out."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, tier: Tier, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.tier = tier

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class Client:
    """Blocking client; one connection, calls serialized by a lock."""

    def __init__(self, host: str, port: int, timeout: float | None = 60.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._lock = threading.Lock()

    def request(self, obj: dict) -> dict:
        with self._lock:
            wire.send_frame(self.sock, obj)
            resp = wire.recv_frame(self.sock)
        if resp is None:
            raise ConnectionError("tier closed the connection")
        return resp

    def call(self, obj: dict) -> dict:
        resp = self.request(obj)
        if resp.get("status") != "OK":
            raise TierError(resp.get("code", "INTERNAL"), resp.get("message", ""))
        return resp

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_fm_fetch(client: Client) -> FMFetch:
    def fetch(raws, version):
        resp = client.call({"type": "FM_EMBED", "version": version,
                            "requests": [wire.raw_to_wire(r) for r in raws]})
        emb = np.array([wire.hex_to_vec(h) for rows in resp["embeddings"] for h in rows])
        return resp["version"], resp["checksum"], emb
    return fetch
