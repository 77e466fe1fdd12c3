"""``frito`` command line.

Exit codes: 0 success, 1 verification or runtime failure, 2 usage error.
Every command writes ``<command>.manifest`` (key=value) into its output
directory and prints that path on success.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, config
from .attention import UnsupportedConfigurationError
from .bench import emit_report, run_bench
from .kvfile import read_kv, record, write_kv
from .masks import FreqMaskSpec, build_mask
from .model import Checkpoint, CheckpointError, forward, load_checkpoint, save_checkpoint
from .tensor import Rng, TensorFormatError, tensor_read, tensor_write
from .trainer import TrainingDivergedError, evaluate, make_dataset, train
from .verify import run_verify


class UsageError(Exception):
    pass


def _write_manifest(out_dir: Path, command: str, resolved: dict, artifacts: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    items = {"subcommand": command, "tool_version": __version__}
    items.update(resolved)
    items.update({f"artifact.{k}": v for k, v in artifacts.items()})
    path = out_dir / f"{command}.manifest"
    write_kv(path, items)
    return path


def _parse_sets(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve(args) -> dict[str, str]:
    layers = []
    if getattr(args, "config", None):
        layers.append(read_kv(args.config))
    layers.append(_parse_sets(getattr(args, "set", None)))
    try:
        return config.resolve(*layers)
    except config.ConfigError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_mask_dump(args) -> int:
    try:
        spec = FreqMaskSpec(args.h, args.w, args.k, args.r, args.v)
    except ValueError as e:
        raise UsageError(str(e)) from None
    mask = build_mask(spec)
    print(mask.ascii())
    artifacts = {}
    if args.out:
        tensor_write(mask.additive(np.float32, hidden=-1e9), args.out)
        artifacts["mask"] = args.out
    out_dir = Path(args.out).parent if args.out else Path(args.out_dir)
    resolved = {"h": spec.h, "w": spec.w, "k": spec.k, "r": spec.r, "v": spec.v}
    print(_write_manifest(out_dir, "mask-dump", resolved, artifacts))
    return 0


def cmd_synth_data(args) -> int:
    kv = _resolve(args)
    task = config.task_spec(kv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    domains = args.domain if args.domain else list(range(task.n_domains))
    lines = []
    for dom in domains:
        if not 0 <= dom < task.n_domains:
            raise UsageError(f"domain {dom} out of range")
        specs, labels = make_dataset(task, dom, args.count, Rng(task.seed, 5, dom))
        for i, (spec, label) in enumerate(zip(specs, labels)):
            name = f"d{dom}_{i:05d}.frt"
            tensor_write(spec, out_dir / name)
            lines.append(f"{name}\t{label}\t{dom}\n")
    (out_dir / "index.tsv").write_text("".join(lines), encoding="utf-8")
    kv["count"] = str(args.count)
    kv["domains"] = ",".join(str(d) for d in domains)
    print(_write_manifest(out_dir, "synth-data", kv, {"index": str(out_dir / "index.tsv")}))
    return 0


def cmd_train(args) -> int:
    kv = _resolve(args)
    cfg = config.encoder_config(kv)
    task = config.task_spec(kv)
    tcfg = config.train_config(kv)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.log"
    ckpt_path = out_dir / "checkpoint.frck"

    best, log = train(Checkpoint.init(cfg), task, tcfg, on_record=None if args.quiet else print)
    save_checkpoint(best, ckpt_path)
    artifacts = {"checkpoint": str(ckpt_path), "metrics": str(log_path)}
    if int(kv["baseline"]):
        base_cfg = cfg.with_mask(cfg.grid.h, 1)
        base, _ = train(Checkpoint.init(base_cfg), task, tcfg)
        base_path = out_dir / "baseline.frck"
        save_checkpoint(base, base_path)
        artifacts["baseline"] = str(base_path)
        for name, ck in (("frito", best), ("baseline", base)):
            accs = {f"acc.d{d}": evaluate(ck, task, d, "full", tcfg.eval_samples)[0] for d in range(task.n_domains)}
            log.append(record(kind="compare", model=name, r=ck.config.mask_spec.r, v=ck.config.mask_spec.v, **accs))
            print(log[-1])
    log_path.write_text("".join(line + "\n" for line in log), encoding="utf-8")
    print(_write_manifest(out_dir, "train", kv, artifacts))
    return 0


def _read_index(data_dir: Path):
    rows = []
    for lineno, line in enumerate((data_dir / "index.tsv").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"index.tsv line {lineno}: expected filename<TAB>class<TAB>domain")
        rows.append((parts[0], int(parts[1]), int(parts[2])))
    return rows


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.r is not None or args.v is not None:
        m = ckpt.config.mask_spec
        ckpt = ckpt.with_mask(FreqMaskSpec(m.h, m.w, m.k, args.r or m.r, args.v or m.v))
    mode = args.mode
    results = {}
    if args.data:
        rows = _read_index(Path(args.data))
        for dom in sorted({r[2] for r in rows}):
            mine = [r for r in rows if r[2] == dom]
            specs = np.stack([tensor_read(Path(args.data) / r[0]) for r in mine])
            labels = np.array([r[1] for r in mine])
            pred = np.argmax(forward(ckpt, specs, mode), axis=-1)
            results[dom] = float(np.mean(pred == labels))
    else:
        task = config.task_spec(_resolve(args))
        for dom in range(task.n_domains):
            results[dom] = evaluate(ckpt, task, dom, mode, args.samples)[0]
    for dom, acc in results.items():
        print(record(kind="eval", mode=mode, domain=dom, acc=acc))
    m = ckpt.config.mask_spec
    resolved = {"checkpoint": args.checkpoint, "mode": mode, "r": m.r, "v": m.v, "data": args.data or ""}
    resolved.update({f"acc.d{d}": repr(a) for d, a in results.items()})
    print(_write_manifest(Path(args.out_dir), "eval", resolved, {}))
    return 0


def cmd_bench(args) -> int:
    try:
        spec = FreqMaskSpec(args.h, args.w, args.k, args.r, args.v)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.t is not None and args.t != spec.t:
        raise UsageError(f"--t {args.t} disagrees with k + h*w = {spec.t}")
    if args.repeats < 5:
        raise UsageError("--repeats must be at least 5")
    if args.d % args.heads:
        raise UsageError(f"--heads {args.heads} does not divide --d {args.d}")
    report = run_bench([(args.d, args.heads)], [spec], repeats=args.repeats, seed=args.seed, parallel=args.parallel)
    text = emit_report(report, args.format)
    sys.stdout.write(text)
    artifacts = {}
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        artifacts["report"] = args.out
    resolved = {"t": spec.t, "h": spec.h, "w": spec.w, "k": spec.k, "r": spec.r, "v": spec.v, "d": args.d,
                "heads": args.heads, "repeats": args.repeats, "seed": args.seed, "parallel": int(args.parallel),
                "format": args.format}
    print(_write_manifest(Path(args.out_dir), "bench", resolved, artifacts))
    return 0


def cmd_verify(args) -> int:
    results = run_verify(quick=not args.full)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(_write_manifest(Path(args.out_dir), "verify", {"suite": "full" if args.full else "quick"}, {}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frito", description="Frequency-regularized attention toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def out_dir(sp):
        sp.add_argument("--out-dir", default=".", help="where the manifest (and outputs) go")

    def cfg_flags(sp):
        sp.add_argument("--config", help="key=value config file (a manifest works too)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("mask-dump", help="render a frequency mask")
    for name in ("h", "w", "k", "r", "v"):
        sp.add_argument(name, type=int)
    sp.add_argument("--out", help="also write the mask as an FRT1 tensor of {0, -1e9}")
    out_dir(sp)
    sp.set_defaults(fn=cmd_mask_dump)

    sp = sub.add_parser("synth-data", help="write synthetic spectrograms and index.tsv")
    cfg_flags(sp)
    sp.add_argument("--count", type=int, default=32, help="samples per domain")
    sp.add_argument("--domain", type=int, action="append", help="domain id (repeatable; default all)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("train", help="train on the synthetic task (full-masked mode)")
    sp.add_argument("config", nargs="?", help="key=value config file")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    sp.add_argument("--quiet", action="store_true")
    out_dir(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="accuracy per domain")
    sp.add_argument("checkpoint")
    sp.add_argument("--data", help="directory written by synth-data")
    cfg_flags(sp)
    sp.add_argument("--mode", choices=("full", "sparse"), default="full")
    sp.add_argument("--r", type=int, help="override the cluster size")
    sp.add_argument("--v", type=int, help="override the overlap factor")
    sp.add_argument("--samples", type=int, default=64, help="eval samples per domain (task mode)")
    out_dir(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="time vanilla / masked / sparse attention")
    sp.add_argument("--t", type=int)
    sp.add_argument("--h", type=int, default=12)
    sp.add_argument("--w", type=int, default=50)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--r", type=int, default=6)
    sp.add_argument("--v", type=int, default=1)
    sp.add_argument("--d", type=int, default=768)
    sp.add_argument("--heads", type=int, default=8)
    sp.add_argument("--repeats", type=int, default=7)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--format", choices=("text", "jsonl"), default="text")
    sp.add_argument("--parallel", action="store_true", help="allow BLAS threads and parallel blocks")
    sp.add_argument("--out", help="also write the report here")
    out_dir(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("verify", help="run the oracle suites")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--quick", action="store_true", help="reduced seeds (default)")
    g.add_argument("--full", action="store_true")
    out_dir(sp)
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        parser.error(str(e))  # exits 2
    except config.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (UnsupportedConfigurationError, CheckpointError, TensorFormatError, TrainingDivergedError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
