"""hypercast: run a serving tier, or publish partial deltas from a trainer checkpoint.

    hypercast serve-fm --config fm.json
    hypercast serve-expert --config expert.json
    hypercast log-tier --config log.json
    hypercast publish --fraction 0.3 --period 60 --config publish.json

Tier configs are JSON objects; see configs/README.md. A started tier prints
``listening HOST PORT`` on its first stdout line and serves until it receives
ADMIN_SHUTDOWN.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from fmexpert import checkpoint
from fmexpert.config import expert_from_dict
from fmexpert.foundation import ConfigError
from fmexpert.hypercast import wire
from fmexpert.hypercast.logtier import EmbeddingStore, LogTier
from fmexpert.hypercast.registry import VersionEntry, VersionRegistry
from fmexpert.hypercast.sync import Publisher, ServerState
from fmexpert.hypercast.tiers import Client, ExpertTier, FMTier, LoggingTier, Tier, TierServer, remote_fm_fetch

_KEYS = {
    "serve-fm": {"host", "port", "versions"},
    "serve-expert": {"host", "port", "checkpoint", "expert", "fm", "fm_timeout", "on_timeout"},
    "log-tier": {"host", "port", "embedding_log", "batch_size", "capacity", "versions"},
    "publish": {"checkpoint", "target", "version", "encoder"},
}


def _load(path: str, command: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("tier config must be a JSON object")
    unknown = sorted(set(cfg) - _KEYS[command])
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    return cfg


def _registry(versions) -> VersionRegistry:
    reg = VersionRegistry()
    for v in versions or []:
        params, _ = checkpoint.load(v["checkpoint"])
        enc = wire.encoder_from_dict(v["encoder"])
        pruned = params.subset(enc.block_names())
        reg.register(VersionEntry(v["tag"], enc, ServerState(pruned)), bool(v.get("primary", False)))
    return reg


def _serve(tier: Tier, cfg: dict) -> int:
    server = TierServer(tier, cfg.get("host", "127.0.0.1"), int(cfg.get("port", 0)))
    host, port = server.address
    print(f"listening {host} {port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    if isinstance(tier, LoggingTier):
        tier.log.flush()
    return 0


def cmd_serve_fm(args) -> int:
    cfg = _load(args.config, "serve-fm")
    return _serve(FMTier(_registry(cfg.get("versions"))), cfg)


def cmd_log_tier(args) -> int:
    cfg = _load(args.config, "log-tier")
    store = EmbeddingStore(cfg.get("embedding_log"), int(cfg.get("batch_size", 4096)), cfg.get("capacity"))
    return _serve(LoggingTier(LogTier(_registry(cfg.get("versions")), store)), cfg)


def cmd_serve_expert(args) -> int:
    cfg = _load(args.config, "serve-expert")
    params, tag = checkpoint.load(cfg["checkpoint"])
    ecfg = expert_from_dict(cfg["expert"])
    if ecfg.embedding_inputs and tag != ecfg.fm_version_selected:
        raise ConfigError(f"checkpoint pinned to {tag!r}, config selects {ecfg.fm_version_selected!r}")
    fetch = None
    if cfg.get("fm"):
        fetch = remote_fm_fetch(Client(cfg["fm"]["host"], int(cfg["fm"]["port"])))
    tier = ExpertTier(params, ecfg, fetch, fm_timeout=float(cfg.get("fm_timeout", 5.0)),
                      on_timeout=cfg.get("on_timeout", "fail"))
    return _serve(tier, cfg)


def cmd_publish(args) -> int:
    cfg = _load(args.config, "publish")
    trainer, _ = checkpoint.load(cfg["checkpoint"])
    tgt = cfg["target"]
    client = Client(tgt["host"], int(tgt["port"]))
    # a full FM checkpoint also holds heads; serving copies only need the encoder
    names = wire.encoder_from_dict(cfg["encoder"]).block_names() if cfg.get("encoder") else None
    pub = Publisher(trainer, args.fraction, source=cfg["version"], names=names)
    n = 0
    try:
        while args.count is None or n < args.count:
            if n:
                time.sleep(args.period)
                fresh, _ = checkpoint.load(cfg["checkpoint"])
                for name in fresh:
                    trainer.set_array(name, fresh.array(name))
                    trainer.counters[name] = fresh.counters[name]
            delta = pub.publish(time.time())
            resp = client.call({"type": "ADMIN_APPLY_DELTA", "version": cfg["version"],
                                "delta": wire.delta_to_wire(delta)})
            print(json.dumps({"sequence": delta.sequence, "blocks": delta.names, "checksum": resp["checksum"]}),
                  flush=True)
            n += 1
    finally:
        client.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypercast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("serve-fm", cmd_serve_fm), ("serve-expert", cmd_serve_expert), ("log-tier", cmd_log_tier)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.set_defaults(fn=fn)
    s = sub.add_parser("publish")
    s.add_argument("--config", required=True)
    s.add_argument("--fraction", type=float, default=0.3)
    s.add_argument("--period", type=float, default=60.0)
    s.add_argument("--count", type=int, default=None, help="stop after this many publishes")
    s.set_defaults(fn=cmd_publish)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, OSError, KeyError, ValueError) as e:
        print(f"hypercast {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
