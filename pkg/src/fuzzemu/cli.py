"""Command-line frontend: campaigns, single-input replay, comparison-site
listings and coverage dump reports."""

from __future__ import annotations

import argparse
import os
import sys
from collections import deque

import numpy as np

from .analysis import find_comparison_sites
from .engine import Engine, load_target
from .fuzzer import (
    INSTR_CHOICES,
    MAX_INPUT_LEN,
    build_plugins,
    campaign,
    crash_key,
    crash_label,
)
from .pcode import AddressSpace, OpCode
from .plugins import CMPLOG_MAGIC, COV_MAGIC, classify_counts, read_map, write_map


def _parse_instr(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _err(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _check_config(path: str) -> int | None:
    if not os.path.exists(path):
        return _err(f"config not found: {path}")
    return None


# ---------------------------------------------------------------------------
# fuzz


def cmd_fuzz(args) -> int:
    rc = _check_config(args.config)
    if rc is not None:
        return rc
    instr = _parse_instr(args.instr)
    try:
        build_plugins(instr)  # fail on bad names before any work happens
    except ValueError as e:
        return _err(str(e))
    if args.max_execs is None and args.max_seconds is None:
        return _err("need a budget: --max-execs and/or --max-seconds")

    seeds = []
    if args.seed_dir:
        if not os.path.isdir(args.seed_dir):
            return _err(f"seed directory not found: {args.seed_dir}")
        for name in sorted(os.listdir(args.seed_dir)):
            with open(os.path.join(args.seed_dir, name), "rb") as fh:
                seeds.append(fh.read())

    def stats_line(s):
        print(
            f"[{s['executions']:>10}] queue={s['queue_entries']} "
            f"crashes={s['crashes']} hangs={s['hangs']} "
            f"buckets={s['novelty_buckets']}",
            flush=True,
        )

    runs = []  # (label, rng seed, output dir)
    if args.workers > 1:
        for w in range(args.workers):
            runs.append((f"worker-{w:02d}", args.seed + w, os.path.join(args.out, f"worker-{w:02d}")))
    else:
        runs.append(("campaign", args.seed, args.out))

    status = 0
    for label, rng_seed, out_dir in runs:  # independent runs, one core each
        try:
            rep = campaign(
                args.config,
                instr=instr,
                seed=rng_seed,
                max_execs=args.max_execs,
                max_seconds=args.max_seconds,
                seeds=seeds,
                out_dir=out_dir,
                max_input_len=args.max_input_len,
                budget_steps=args.budget_steps,
                stats_every=args.stats_every,
                stats_cb=stats_line,
            )
        except FileNotFoundError as e:
            return _err(f"missing file: {e.filename or e}")
        print(
            f"{label}: {rep.executions} execs, {len(rep.queue)} queue entries, "
            f"{len(rep.crashes)} unique crashes, {len(rep.hangs)} hangs -> {out_dir}"
        )
        for key in sorted(rep.crashes, key=crash_label):
            rec = rep.crashes[key]
            print(f"  {crash_label(key)}: first at exec {rec.found_at} (x{rec.count})")
    return status


# ---------------------------------------------------------------------------
# run one input


def cmd_run(args) -> int:
    rc = _check_config(args.config)
    if rc is not None:
        return rc
    instr = _parse_instr(args.instr)
    try:
        plugins, clog = build_plugins(instr)
    except ValueError as e:
        return _err(str(e))
    if args.dump_cmplog and clog is None:
        return _err("--dump-cmplog needs cmplog in --instr")
    try:
        target = load_target(args.config)
    except FileNotFoundError as e:
        return _err(f"missing file: {e.filename or e}")
    try:
        with open(args.input, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        return _err(f"input not found: {args.input}")

    kw = {"budget": args.budget_steps} if args.budget_steps else {}
    eng = Engine.from_target(target, plugins=plugins, **kw)
    res = eng.execute(data)
    if res.status == "exit":
        print(f"Exit(code={res.exit_code}, steps={res.steps})")
    elif res.status == "hang":
        print(f"Hang(pc={res.pc:#x}, steps={res.steps})")
    elif res.crash.kind == "crash-port":
        print(f"Crash(id={res.crash.detail}, pc={res.pc:#x})")
    else:
        print(f"Fault({crash_label(crash_key(res.crash))}, pc={res.pc:#x})")
    if res.stdout:
        print(f"stdout: {res.stdout!r}")
    if args.dump_cov:
        cov = plugins[0]  # edge coverage is always first in the stack
        write_map(args.dump_cov, bytes(cov.map), COV_MAGIC)
        print(f"coverage dump: {args.dump_cov}")
    if args.dump_cmplog:
        write_map(args.dump_cmplog, bytes(clog.buf), CMPLOG_MAGIC)
        print(f"cmplog dump: {args.dump_cmplog}")
    return 0


# ---------------------------------------------------------------------------
# static comparison listing


def _vn(v) -> str:
    if v.space == AddressSpace.CONSTANT:
        return f"{v.id:#x}"
    if v.space == AddressSpace.REGISTER:
        return f"x{v.id}" if v.id < 32 else f"r{v.id}"
    if v.space == AddressSpace.TEMP:
        return f"tmp{v.id}"
    return f"[{v.id:#x}]"


def cmd_analyze(args) -> int:
    rc = _check_config(args.config)
    if rc is not None:
        return rc
    try:
        target = load_target(args.config)
    except FileNotFoundError as e:
        return _err(f"missing file: {e.filename or e}")
    eng = Engine.from_target(target)
    work = deque([target.entry] + sorted((target.symbols or {}).values()))
    seen: set[int] = set()
    sites = []
    while work and len(seen) < 4096:
        addr = work.popleft()
        if addr in seen:
            continue
        seen.add(addr)
        try:
            blk = eng.get_block(addr)
        except Exception:
            continue  # data, unmapped or undecodable: not code we can walk
        for s in find_comparison_sites(blk):
            sites.append((blk.guest_addr, s))
        for o in blk.ops:
            if (
                o.opcode in (OpCode.BRANCH, OpCode.CBRANCH, OpCode.CALL)
                and o.inputs
                and o.inputs[0].space == AddressSpace.RAM
            ):
                work.append(o.inputs[0].id)
        if blk.ops[-1].opcode in (OpCode.CALL, OpCode.CALLIND):
            work.append(blk.guest_addr + blk.byte_len)
    sites.sort(key=lambda t: (t[0], t[1].op_index))
    for addr, s in sites:
        print(
            f"{addr:#x}+{s.op_index}: {s.operator.name} width={s.width} "
            f"lhs={_vn(s.lhs)} rhs={_vn(s.rhs)}"
        )
    return 0


# ---------------------------------------------------------------------------
# coverage dump report


def cmd_cov_report(args) -> int:
    try:
        payload = read_map(args.dump, COV_MAGIC)
    except FileNotFoundError:
        return _err(f"dump not found: {args.dump}")
    except ValueError as e:
        return _err(str(e))
    counts = np.frombuffer(payload, dtype=np.uint8)
    cls = classify_counts(counts)
    print(f"cells={len(counts)} nonzero={int((counts != 0).sum())}")
    for b in (1, 2, 4, 8, 16, 32, 64, 128):
        n = int((cls == b).sum())
        if n:
            print(f"bucket {b:>3}: {n}")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="fuzzemu",
        description="greybox fuzzer for RV32I images lifted through a P-code emulator",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    f = sub.add_parser("fuzz", help="run a fuzzing campaign")
    f.add_argument("--config", required=True, help="target config JSON")
    f.add_argument("--instr", default="cov",
                   help=f"comma-separated instrumentation: {', '.join(INSTR_CHOICES)}")
    f.add_argument("--max-execs", type=int, default=None)
    f.add_argument("--max-seconds", type=float, default=None)
    f.add_argument("--seed", type=int, default=1, help="rng seed")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--seed-dir", default=None, help="directory of seed inputs")
    f.add_argument("--workers", type=int, default=1,
                   help="independent campaigns in out/worker-NN, seeds seed..seed+N-1")
    f.add_argument("--max-input-len", type=int, default=MAX_INPUT_LEN)
    f.add_argument("--budget-steps", type=int, default=None,
                   help="per-execution instruction budget before an input counts as a hang")
    f.add_argument("--stats-every", type=int, default=5000)
    f.set_defaults(fn=cmd_fuzz)

    r = sub.add_parser("run", help="execute one input and explain the outcome")
    r.add_argument("--config", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--instr", default="cov")
    r.add_argument("--dump-cov", default=None, help="write the coverage map dump here")
    r.add_argument("--dump-cmplog", default=None, help="write the cmplog slot dump here")
    r.add_argument("--budget-steps", type=int, default=None)
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("analyze-cmps", help="list comparison sites reachable from the entry")
    a.add_argument("--config", required=True)
    a.set_defaults(fn=cmd_analyze)

    c = sub.add_parser("cov-report", help="summarize a coverage dump")
    c.add_argument("dump", help="coverage dump file")
    c.set_defaults(fn=cmd_cov_report)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
