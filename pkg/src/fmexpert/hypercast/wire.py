"""Length-prefixed frames of field-named JSON objects.

frame := u32 big-endian byte length, then that many bytes of UTF-8 JSON (one
object). Float vectors travel as base-16 strings of little-endian f64, so
values round-trip bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import socket
import struct

import numpy as np

from fmexpert.encoder import EncoderConfig
from fmexpert.hypercast.sync import WeightDelta
from fmexpert.stream import RawRequest

MAX_FRAME = 1 << 30
_LEN = struct.Struct(">I")


class BadRequest(ValueError):
    code = "BAD_REQUEST"


class FrameError(ValueError):
    pass


def dumps(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode()


def encode_frame(obj) -> bytes:
    body = dumps(obj)
    if len(body) > MAX_FRAME:
        raise FrameError(f"frame of {len(body)} bytes exceeds limit")
    return _LEN.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        c = sock.recv(min(n - got, 1 << 20))
        if not c:
            if got == 0:
                return None
            raise FrameError("connection closed mid-frame")
        chunks.append(c)
        got += len(c)
    return b"".join(chunks)


def send_frame(sock: socket.socket, obj) -> None:
    sock.sendall(encode_frame(obj))


def recv_frame(sock: socket.socket):
    """Next object, or None on a clean end of stream."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise FrameError(f"frame length {n} exceeds limit")
    body = _recv_exact(sock, n) if n else b""
    if body is None:
        raise FrameError("connection closed mid-frame")
    try:
        obj = json.loads(body)
    except ValueError as e:
        raise FrameError(f"frame is not JSON: {e}") from None
    if not isinstance(obj, dict):
        raise FrameError("frame must hold one object")
    return obj


def decode_frames(buf: bytes) -> list:
    """All complete frames in ``buf``; trailing partial data is an error."""
    out = []
    i = 0
    while i < len(buf):
        if len(buf) - i < 4:
            raise FrameError("truncated frame header")
        (n,) = _LEN.unpack_from(buf, i)
        if len(buf) - i - 4 < n:
            raise FrameError("truncated frame body")
        out.append(json.loads(buf[i + 4:i + 4 + n]))
        i += 4 + n
    return out


# --- payload codecs ---------------------------------------------------------------

def vec_to_hex(v) -> str:
    return np.ascontiguousarray(v, dtype="<f8").tobytes().hex()


def hex_to_vec(s: str) -> np.ndarray:
    try:
        raw = bytes.fromhex(s)
    except (TypeError, ValueError):
        raise BadRequest("vector is not base-16") from None
    if len(raw) % 8:
        raise BadRequest("vector byte length is not a multiple of 8")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def matrix_to_wire(a: np.ndarray) -> dict:
    a = np.atleast_2d(a)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "hex": vec_to_hex(a)}


def matrix_from_wire(obj) -> np.ndarray:
    try:
        rows, cols, h = int(obj["rows"]), int(obj["cols"]), obj["hex"]
    except (KeyError, TypeError, ValueError):
        raise BadRequest("matrix needs rows, cols, hex") from None
    v = hex_to_vec(h)
    if v.size != rows * cols:
        raise BadRequest("matrix size does not match rows*cols")
    return v.reshape(rows, cols)


def delta_to_wire(d: WeightDelta) -> dict:
    return {"source": d.source, "sequence": d.sequence, "published_at": d.published_at,
            "blocks": [{"name": n, "counter": c, "value": matrix_to_wire(a)} for n, c, a in d.blocks]}


def delta_from_wire(obj) -> WeightDelta:
    try:
        blocks = tuple((b["name"], int(b["counter"]), matrix_from_wire(b["value"])) for b in obj["blocks"])
        return WeightDelta(str(obj["source"]), int(obj["sequence"]), blocks, float(obj.get("published_at", 0.0)))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, BadRequest):
            raise
        raise BadRequest(f"malformed delta: {e}") from None


def params_to_wire(blocks) -> dict:
    return {n: matrix_to_wire(np.asarray(blocks[n])) for n in blocks}


def params_from_wire(obj) -> dict[str, np.ndarray]:
    if not isinstance(obj, dict):
        raise BadRequest("params must be an object")
    return {n: matrix_from_wire(v) for n, v in obj.items()}


def encoder_to_dict(cfg: EncoderConfig) -> dict:
    return dataclasses.asdict(cfg)


def encoder_from_dict(obj) -> EncoderConfig:
    names = {f.name for f in dataclasses.fields(EncoderConfig)}
    if not isinstance(obj, dict) or set(obj) - names:
        raise BadRequest(f"bad encoder config keys {sorted(set(obj) - names) if isinstance(obj, dict) else obj}")
    return EncoderConfig(**obj)


def raw_to_wire(r: RawRequest) -> dict:
    hist = [[int(a), int(b), int(c), int(d)] for a, b, c, d in
            zip(r.hist_items, r.hist_surface, r.hist_bucket, r.hist_action)]
    cands = [[int(a), int(b)] for a, b in zip(r.cand_items, r.cand_surface)]
    return {"request_id": r.request_id, "user_id": r.user_id, "ts": r.ts, "history": hist,
            "candidates": cands, "hist_count": r.hist_count}


def raw_from_wire(obj) -> RawRequest:
    try:
        hist = np.asarray(obj.get("history", []), dtype=np.int64).reshape(-1, 4)
        cands = np.asarray(obj["candidates"], dtype=np.int64).reshape(-1, 2)
        req = RawRequest(int(obj.get("request_id", 0)), int(obj.get("user_id", 0)), float(obj.get("ts", 0.0)),
                         hist[:, 0], hist[:, 1], hist[:, 2], hist[:, 3], cands[:, 0], cands[:, 1],
                         int(obj.get("hist_count", len(hist))))
    except (KeyError, TypeError, ValueError) as e:
        raise BadRequest(f"malformed request: {e}") from None
    if req.n_candidates == 0:
        raise BadRequest("request needs at least one candidate")
    if (hist < 0).any() or (cands < 0).any():
        raise BadRequest("ids must be non-negative")
    return req
