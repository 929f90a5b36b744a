"""Greybox fuzzing campaign: queue scheduling, novelty tracking, mutators.

The loop is deliberately boring: seeds -> round-robin over the queue, each
visit runs a one-shot deterministic stage, an input-to-state stage when cmplog
is attached, and an energy-scaled havoc stage.  All randomness comes from one
seeded Random instance, so a campaign is a pure function of (target, instr,
seed, seeds, execution budget).  Wall-clock budgets only decide *when* to
stop; the executions actually performed are recorded so a replay can stop at
the same point and reproduce the run bit for bit.
"""

from __future__ import annotations

import base64
import json
import os
import random
import time
from dataclasses import dataclass

import numpy as np

from .engine import CrashInfo, Engine, Target, load_target
from .plugins import (
    CmplogPlugin,
    CmpRoutinePlugin,
    CompareCovPlugin,
    ContextPlugin,
    CoveragePlugin,
    classify_counts,
)

MAX_INPUT_LEN = 4096
DET_MAX_LEN = 64  # deterministic stage is quadratic-ish, skip huge entries
HAVOC_ROUNDS = 32  # base havoc variants per queue visit, scaled by energy
ENERGY_CAP = 16.0
BARREN_FLOOR = 0.25  # barren entries keep a trickle so they can recover
ARITH_MAX = 35
SPLICE_MIN = 2  # queue entries needed before splicing kicks in

# 0, 1, -1, signed max, signed min at each width
INTERESTING = {
    1: (0, 1, 0xFF, 0x7F, 0x80),
    2: (0, 1, 0xFFFF, 0x7FFF, 0x8000),
    4: (0, 1, 0xFFFFFFFF, 0x7FFFFFFF, 0x80000000),
}

INSTR_CHOICES = ("cov", "context", "cmplog", "comparecov")


def build_plugins(instr) -> tuple[tuple, CmplogPlugin | None]:
    """Edge coverage is always on; the names select what rides on top."""
    names = list(instr)
    for n in names:
        if n not in INSTR_CHOICES:
            raise ValueError(
                f"unknown instrumentation {n!r}; choose from {', '.join(INSTR_CHOICES)}"
            )
    ctx = ContextPlugin() if "context" in names else None
    plugins = [CoveragePlugin(context=ctx)]
    if ctx is not None:
        plugins.append(ctx)
    clog = None
    if "cmplog" in names:
        clog = CmplogPlugin(rtn=True)
        plugins.append(clog)
    if "comparecov" in names:
        plugins.append(CompareCovPlugin())
        plugins.append(CmpRoutinePlugin(cmplog=clog))
    return tuple(plugins), clog


# ---------------------------------------------------------------------------
# novelty bookkeeping


class VirginMap:
    """Monotone record of every (map, index, bucket) triple seen so far.

    Counters are bucketed before the check, so an input is novel exactly when
    it drives some map cell into a bucket no earlier input reached."""

    def __init__(self):
        self.seen: dict[str, np.ndarray] = {}
        self.total = 0

    def observe(self, name: str, raw: bytearray) -> list[tuple[int, int]]:
        """Fold one post-execution map in; return fresh (index, bucket) pairs."""
        cls = classify_counts(np.frombuffer(raw, dtype=np.uint8))
        virgin = self.seen.get(name)
        if virgin is None:
            virgin = np.zeros(len(raw), dtype=np.uint8)
            self.seen[name] = virgin
        fresh = cls & ~virgin
        if not fresh.any():
            return []
        out = []
        for i in np.nonzero(fresh)[0]:
            bits = int(fresh[i])
            while bits:
                low = bits & -bits
                out.append((int(i), low))
                bits ^= low
        virgin |= fresh
        self.total += len(out)
        return out


@dataclass
class QueueEntry:
    id: int
    data: bytes
    found_at: int  # executions performed when this input was discovered
    parent: int | None
    novelty: tuple[tuple[str, int, int], ...]  # (map, index, bucket) it contributed
    energy: float = 1.0
    depth: int = 0  # length of the parent chain back to a seed
    barren: int = 0  # consecutive queue visits that produced no novelty
    det_done: bool = False
    i2s_done: bool = False


@dataclass
class CrashRecord:
    key: tuple
    input: bytes  # first input that hit this key wins
    found_at: int
    pc: int
    count: int = 1


def crash_key(c: CrashInfo) -> tuple:
    """Dedup key: bug id for the crash port, else fault address, else pc."""
    if c.kind == "crash-port":
        return (c.kind, c.detail)
    if c.addr is not None:
        return (c.kind, c.addr)
    return (c.kind, c.pc)


def crash_label(key: tuple) -> str:
    kind, val = key
    if kind == "crash-port":
        return f"{kind}-{val}"
    return f"{kind}-{val:#x}"


def assign_energy(novelty: int, depth: int) -> float:
    """Richer finds and deeper derivation chains get more havoc, capped.

    Depth credit keeps the budget on the frontier of multi-step comparisons:
    every solved byte spawns a child one level deeper.  The novelty term is
    capped low on purpose, otherwise the first seed lights up half the map
    and hogs the schedule for the rest of the run."""
    e = (1.0 + min(novelty, 8) / 4.0) * (1.0 + min(depth, 8) / 2.0)
    return min(e, ENERGY_CAP)


# ---------------------------------------------------------------------------
# mutation stages (pure functions, deterministic given their arguments)


def deterministic_variants(data: bytes) -> list[bytes]:
    """Walking bitflips (1/2/4), byte flips, interesting values and +-1..35
    arithmetic at widths 1/2/4.  Empty inputs just get the interesting values
    inserted.  Duplicates are dropped, first producer wins."""
    out: list[bytes] = []
    seen = {data}

    def emit(b: bytes):
        if b not in seen:
            seen.add(b)
            out.append(b)

    if not data:
        for w in (1, 2, 4):
            for v in INTERESTING[w]:
                emit(v.to_bytes(w, "little"))
        return out

    nbits = len(data) * 8
    for width in (1, 2, 4):
        for pos in range(nbits - width + 1):
            b = bytearray(data)
            for k in range(width):
                b[(pos + k) >> 3] ^= 0x80 >> ((pos + k) & 7)
            emit(bytes(b))
    for i in range(len(data)):
        b = bytearray(data)
        b[i] ^= 0xFF
        emit(bytes(b))
    for w in (1, 2, 4):
        for i in range(len(data) - w + 1):
            for v in INTERESTING[w]:
                b = bytearray(data)
                b[i : i + w] = v.to_bytes(w, "little")
                emit(bytes(b))
    m = {1: 0xFF, 2: 0xFFFF, 4: 0xFFFFFFFF}
    for w in (1, 2, 4):
        for i in range(len(data) - w + 1):
            cur = int.from_bytes(data[i : i + w], "little")
            for d in range(1, ARITH_MAX + 1):
                for nv in ((cur + d) & m[w], (cur - d) & m[w]):
                    b = bytearray(data)
                    b[i : i + w] = nv.to_bytes(w, "little")
                    emit(bytes(b))
    return out


def i2s_variants(data: bytes, pairs, max_len: int = MAX_INPUT_LEN) -> list[bytes]:
    """Input-to-state: find one logged operand in the input, substitute the
    other.  Tried encodings are little-endian and byte-reversed, at the full
    logged width and with trailing zero bytes trimmed.  Substitution only; no
    arithmetic or xor transforms are inferred, so an operand whose bytes never
    appear in the input stays out of reach."""
    out: list[bytes] = []
    seen = {data}

    def emit(b: bytes):
        b = b[:max_len]
        if b not in seen:
            seen.add(b)
            out.append(b)

    for lhs, rhs, width, _hits in pairs:
        w = min(max(int(width), 1), 8)
        mask = (1 << (8 * w)) - 1
        for a, b in ((lhs, rhs), (rhs, lhs)):
            pat_full = (a & mask).to_bytes(w, "little")
            rep_full = (b & mask).to_bytes(w, "little")
            trimmed = pat_full.rstrip(b"\x00") or pat_full[:1]
            forms = [(pat_full, rep_full, False), (pat_full[::-1], rep_full[::-1], False)]
            if len(trimmed) < w:
                forms.append((trimmed, rep_full[: len(trimmed)], True))
                forms.append((trimmed[::-1], rep_full[: len(trimmed)][::-1], False))
            for pat, rep, grow in forms:
                start = data.find(pat)
                while start >= 0:
                    emit(data[:start] + rep + data[start + len(pat) :])
                    if grow:
                        # widen a zero-trimmed match back to the logged width
                        emit(data[:start] + rep_full + data[start + w :])
                    start = data.find(pat, start + 1)
    return out


def havoc_variant(rng: random.Random, data: bytes, pool, max_len: int = MAX_INPUT_LEN) -> bytes:
    """One stacked random mutation: 2..16 of flip / overwrite / insert /
    delete / duplicate-chunk / append / splice, length clamped to [0, max_len].
    Append is its own op (insert rarely lands at the tail): growing the input
    without touching existing bytes is how length-gated compares fall."""
    buf = bytearray(data)
    for _ in range(1 << rng.randint(1, 4)):
        if not buf:
            buf.append(rng.randrange(256))
            continue
        choice = rng.randrange(9 if len(pool) >= SPLICE_MIN else 8)
        if choice == 0:
            p = rng.randrange(len(buf) * 8)
            buf[p >> 3] ^= 1 << (p & 7)
        elif choice == 1:
            buf[rng.randrange(len(buf))] = rng.randrange(256)
        elif choice == 2:
            w = rng.choice((1, 2, 4))
            if len(buf) >= w:
                p = rng.randrange(len(buf) - w + 1)
                buf[p : p + w] = rng.choice(INTERESTING[w]).to_bytes(w, "little")
        elif choice == 3:
            if len(buf) < max_len:
                buf.insert(rng.randrange(len(buf) + 1), rng.randrange(256))
        elif choice == 4:
            del buf[rng.randrange(len(buf))]
        elif choice == 5:
            n = rng.randint(1, min(len(buf), 32))
            src = rng.randrange(len(buf) - n + 1)
            chunk = buf[src : src + n]
            at = rng.randrange(len(buf) + 1)
            buf[at:at] = chunk
            del buf[max_len:]
        elif choice == 6:
            n = rng.randint(1, min(len(buf), 32))
            src = rng.randrange(len(buf) - n + 1)
            dst = rng.randrange(len(buf) - n + 1)
            buf[dst : dst + n] = buf[src : src + n]
        elif choice == 7:
            for _ in range(rng.randint(1, 4)):
                if len(buf) < max_len:
                    buf.append(rng.randrange(256))
        else:
            other = pool[rng.randrange(len(pool))]
            if other:
                cut = rng.randrange(len(buf))
                buf = bytearray(buf[:cut] + other[rng.randrange(len(other)) :])
                del buf[max_len:]
    return bytes(buf)


# ---------------------------------------------------------------------------
# the campaign loop


@dataclass
class CampaignReport:
    executions: int
    queue: list
    crashes: dict
    hangs: dict
    coverage: list  # (executions, total novelty buckets) samples
    wall_seconds: float

    def crash_port_ids(self) -> set[int]:
        return {k[1] for k in self.crashes if k[0] == "crash-port"}

    def execs_to_crash(self, bug_id: int) -> int | None:
        rec = self.crashes.get(("crash-port", bug_id))
        return rec.found_at if rec else None


class Fuzzer:
    def __init__(
        self,
        target: Target,
        instr=("cov",),
        seed: int = 1,
        max_execs: int | None = None,
        max_seconds: float | None = None,
        max_input_len: int = MAX_INPUT_LEN,
        budget_steps: int | None = None,
        stop_on_bugs=None,
        stats_every: int = 0,
        stats_cb=None,
    ):
        self.instr = tuple(instr)
        plugins, self.cmplog = build_plugins(self.instr)
        kw = {"budget": budget_steps} if budget_steps else {}
        self.engine = Engine.from_target(target, plugins=plugins, **kw)
        self.feedback = [(p.name, p.map) for p in plugins if getattr(p, "map", None)]
        self.seed = seed
        self.rng = random.Random(seed)
        self.max_execs = max_execs
        self.max_seconds = max_seconds
        self.stop_on_bugs = frozenset(stop_on_bugs) if stop_on_bugs else None
        self.max_input_len = max_input_len
        self.stats_every = stats_every
        self.stats_cb = stats_cb
        self.virgin = VirginMap()
        self.queue: list[QueueEntry] = []
        self.crashes: dict[tuple, CrashRecord] = {}
        self.hangs: dict[tuple, CrashRecord] = {}
        self.coverage: list[tuple[int, int]] = []
        self.execs = 0
        self._t0 = 0.0
        self.stop = False

    # one execution plus all bookkeeping
    def _run_one(self, data: bytes, parent: int | None):
        data = data[: self.max_input_len]
        res = self.engine.execute(data)
        self.execs += 1
        novel = []
        for name, buf in self.feedback:
            novel += [(name, i, b) for i, b in self.virgin.observe(name, buf)]
        if res.status == "crash":
            key = crash_key(res.crash)
            rec = self.crashes.get(key)
            if rec is None:
                self.crashes[key] = CrashRecord(key, data, self.execs, res.crash.pc)
                if self.stop_on_bugs is not None and self.stop_on_bugs <= {
                    k[1] for k in self.crashes if k[0] == "crash-port"
                }:
                    self.stop = True
            else:
                rec.count += 1
        elif res.status == "hang":
            key = ("hang", res.pc)
            rec = self.hangs.get(key)
            if rec is None:
                self.hangs[key] = CrashRecord(key, data, self.execs, res.pc)
            else:
                rec.count += 1
        elif novel:  # crashes and hangs are never queued
            qid = len(self.queue)
            depth = 0 if parent is None else self.queue[parent].depth + 1
            self.queue.append(
                QueueEntry(qid, data, self.execs, parent, tuple(novel),
                           energy=assign_energy(len(novel), depth), depth=depth)
            )
            self.coverage.append((self.execs, self.virgin.total))
        if self.max_execs is not None and self.execs >= self.max_execs:
            self.stop = True
        if self.max_seconds is not None and time.monotonic() - self._t0 >= self.max_seconds:
            self.stop = True
        if self.stats_every and self.stats_cb and self.execs % self.stats_every == 0:
            self.stats_cb(self.snapshot())
        return res

    def _fuzz_entry(self, e: QueueEntry):
        before = self.virgin.total
        if not e.det_done:
            e.det_done = True
            if len(e.data) <= DET_MAX_LEN:
                for v in deterministic_variants(e.data):
                    self._run_one(v, e.id)
                    if self.stop:
                        return
        if self.cmplog is not None and not e.i2s_done:
            e.i2s_done = True
            self._run_one(e.data, e.id)  # repopulate cmplog slots for this input
            if self.stop:
                return
            for v in i2s_variants(e.data, self.cmplog.pairs(), self.max_input_len):
                self._run_one(v, e.id)
                if self.stop:
                    return
        pool = [q.data for q in self.queue]
        rounds = int(HAVOC_ROUNDS * max(e.energy * 0.5 ** e.barren, BARREN_FLOOR))
        for _ in range(rounds):
            self._run_one(havoc_variant(self.rng, e.data, pool, self.max_input_len), e.id)
            if self.stop:
                return
        # all executions above were variants of e, so any fresh bucket since
        # `before` is e's doing; visits that add nothing cost the entry energy
        if self.virgin.total == before:
            e.barren += 1
        else:
            e.barren = 0

    def run(self, seeds=()) -> CampaignReport:
        self._t0 = time.monotonic()
        seedlist = [bytes(s) for s in seeds] or [b"\x00"]
        for s in seedlist:
            self._run_one(s, None)
            if self.stop:
                break
        while not self.stop and self.queue:
            for i in range(len(self.queue)):  # entries added mid-cycle wait a round
                self._fuzz_entry(self.queue[i])
                if self.stop:
                    break
        self.coverage.append((self.execs, self.virgin.total))
        return CampaignReport(
            self.execs, self.queue, self.crashes, self.hangs,
            self.coverage, time.monotonic() - self._t0,
        )

    def snapshot(self) -> dict:
        return {
            "executions": self.execs,
            "queue_entries": len(self.queue),
            "crashes": len(self.crashes),
            "hangs": len(self.hangs),
            "novelty_buckets": self.virgin.total,
        }


# ---------------------------------------------------------------------------
# campaign driver with on-disk outputs


def _write(path: str, data: bytes):
    with open(path, "wb") as fh:
        fh.write(data)


def write_outputs(out_dir: str, fz: Fuzzer, rep: CampaignReport, target_path: str, seeds):
    qdir = os.path.join(out_dir, "queue")
    cdir = os.path.join(out_dir, "crashes")
    hdir = os.path.join(out_dir, "hangs")
    for d in (qdir, cdir, hdir):
        os.makedirs(d, exist_ok=True)
    for e in rep.queue:
        _write(os.path.join(qdir, f"id-{e.id:06d}"), e.data)
    for key, rec in rep.crashes.items():
        _write(os.path.join(cdir, crash_label(key)), rec.input)
    for key, rec in rep.hangs.items():
        _write(os.path.join(hdir, f"hang-{rec.pc:#x}"), rec.input)

    # stats.json holds only run-deterministic facts so replays are bit-equal;
    # anything wall-clock dependent lives in runtime.json
    stats = {
        "executions": rep.executions,
        "queue_entries": len(rep.queue),
        "novelty_buckets": fz.virgin.total,
        "unique_crashes": {
            crash_label(k): {"found_at": r.found_at, "count": r.count, "pc": r.pc}
            for k, r in sorted(rep.crashes.items(), key=lambda kv: crash_label(kv[0]))
        },
        "hangs": {
            f"hang-{r.pc:#x}": {"found_at": r.found_at, "count": r.count}
            for _, r in sorted(rep.hangs.items(), key=lambda kv: kv[1].pc)
        },
        "coverage": [[e, t] for e, t in rep.coverage],
    }
    with open(os.path.join(out_dir, "stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    runtime = {
        "wall_seconds": round(rep.wall_seconds, 3),
        "execs_per_sec": round(rep.executions / rep.wall_seconds, 1) if rep.wall_seconds else 0.0,
    }
    with open(os.path.join(out_dir, "runtime.json"), "w") as fh:
        json.dump(runtime, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # executions-performed is recorded, not the requested budget: a run cut
    # short by wall clock replays as an exec-capped run and lands on the same
    # final state
    camp = {
        "format": 1,
        "target": os.path.abspath(target_path),
        "instr": list(fz.instr),
        "seed": fz.seed,
        "executions": rep.executions,
        "max_input_len": fz.max_input_len,
        "seeds": [base64.b64encode(bytes(s)).decode("ascii") for s in seeds],
    }
    with open(os.path.join(out_dir, "campaign.json"), "w") as fh:
        json.dump(camp, fh, indent=2, sort_keys=True)
        fh.write("\n")


def campaign(
    target_path: str,
    instr=("cov",),
    seed: int = 1,
    max_execs: int | None = None,
    max_seconds: float | None = None,
    seeds=(),
    out_dir: str | None = None,
    max_input_len: int = MAX_INPUT_LEN,
    budget_steps: int | None = None,
    stop_on_bugs=None,
    stats_every: int = 0,
    stats_cb=None,
) -> CampaignReport:
    target = load_target(target_path)
    fz = Fuzzer(
        target, instr=instr, seed=seed, max_execs=max_execs, max_seconds=max_seconds,
        max_input_len=max_input_len, budget_steps=budget_steps, stop_on_bugs=stop_on_bugs,
        stats_every=stats_every, stats_cb=stats_cb,
    )
    rep = fz.run(seeds)
    if out_dir is not None:
        write_outputs(out_dir, fz, rep, target_path, seeds)
    return rep


def replay(campaign_json: str, out_dir: str | None = None) -> CampaignReport:
    """Re-run a recorded campaign; same seed + same exec count = same outputs."""
    with open(campaign_json) as fh:
        cfg = json.load(fh)
    if cfg.get("format") != 1:
        raise ValueError(f"unsupported campaign format in {campaign_json}")
    return campaign(
        cfg["target"],
        instr=tuple(cfg["instr"]),
        seed=cfg["seed"],
        max_execs=cfg["executions"],
        seeds=[base64.b64decode(s) for s in cfg["seeds"]],
        out_dir=out_dir,
        max_input_len=cfg["max_input_len"],
    )
