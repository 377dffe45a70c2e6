"""fmexpert: end-to-end runs, experiment reports and artifact inspection.

    fmexpert run --config configs/smoke.cfg --out runs/smoke
    fmexpert eval transfer --config configs/experiment.cfg --out reports/transfer.jsonl
    fmexpert inspect runs/smoke/checkpoints/fm-large.pruned.ckpt
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from collections import Counter
from dataclasses import replace
from pathlib import Path

from fmexpert import checkpoint
from fmexpert.config import EXPERIMENTS, load
from fmexpert.foundation import ConfigError
from fmexpert.pipeline import StageError, run_pipeline


def _config(args):
    cfg = load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_pipeline(cfg, args.out, harness_mode=args.harness_mode)
    for name, path in sorted(res.reports.items()):
        print(f"{name}: {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = replace(_config(args), experiments=(args.experiment,))
    out = Path(args.out)
    with tempfile.TemporaryDirectory(prefix="fmexpert-eval-") as tmp:
        work = Path(args.workdir) if args.workdir else Path(tmp)
        res = run_pipeline(cfg, work, harness_mode=args.harness_mode)
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(res.reports[args.experiment], out)
    for line in out.read_text().splitlines():
        print(line)
    return 0


def _inspect_jsonl(path: Path) -> None:
    n = 0
    versions: Counter[str] = Counter()
    surfaces: Counter[int] = Counter()
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                rec = json.loads(line)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a JSON record (truncated file?)") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: not a record")
            n += 1
            if "vec" in rec:
                versions[rec.get("ctx", {}).get("version", "?")] += 1
            if "surface_id" in rec:
                surfaces[rec["surface_id"]] += 1
    if versions:
        print(f"embedding log {path}: {n} records")
        for v, c in sorted(versions.items()):
            print(f"  version {v}: {c}")
    elif surfaces:
        print(f"event log {path}: {n} records")
        for s, c in sorted(surfaces.items()):
            print(f"  surface {s}: {c}")
    else:
        print(f"report {path}: {n} records")


def cmd_inspect(args) -> int:
    path = Path(args.path)
    head = path.read_bytes()[:4]
    if head == checkpoint.MAGIC:
        params, tag = checkpoint.load(path)
        kind = "expert" if tag is not None else "fm"
        heads = [n for n in params if n.startswith(("head.", "align."))]
        print(f"checkpoint {path}: {kind}, {len(params)} blocks, {params.n_params()} params")
        if tag is not None:
            print(f"  fm_version_selected: {tag}")
        if kind == "fm":
            print(f"  block set: {'full' if heads else 'pruned (inference subgraph)'}")
        for n in params:
            r, c = params.array(n).shape
            print(f"  {n:<28} {r:>6} x {c:<6} counter={params.counters[n]}")
        return 0
    if head[:1] == b"{":
        _inspect_jsonl(path)
        return 0
    raise ValueError(f"{path}: unrecognized file format")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmexpert", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(s, out_required=True):
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=out_required, default="runs/latest")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--harness-mode", action="store_true",
                       help="run serving tiers in-process instead of as separate processes")

    s = sub.add_parser("run", help="full pipeline; writes checkpoints/, logs/, reports/ under --out")
    common(s, out_required=False)
    s.set_defaults(fn=cmd_run)
    s = sub.add_parser("eval", help="one experiment; writes its report to --out")
    s.add_argument("experiment", choices=EXPERIMENTS)
    common(s)
    s.add_argument("--workdir", default=None, help="keep the run's artifacts here")
    s.set_defaults(fn=cmd_eval)
    s = sub.add_parser("inspect", help="dump a checkpoint or log file")
    s.add_argument("path")
    s.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"fmexpert: config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"fmexpert: stage '{e.stage}' failed: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:
        print(f"fmexpert: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
