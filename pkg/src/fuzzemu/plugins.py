"""Fuzzing instrumentation as block-rewrite plugins.

Every plugin here works the same way: when the engine lifts a block, the
plugin inspects the (architecture-independent) ops, injects synthetic ops that
update engine-side storage, and returns the rewrite.  Analyses skip synthetic
ops, so plugins never instrument each other's code, and injected ops attach to
the guest instruction containing their insertion point, so budget accounting
and fault attribution are unchanged.

Feedback written during a run lives in engine storage buffers, zeroed before
every execution; consumers read them afterwards.  A plugin with a `maps`
attribute exposes saturating counter maps for coverage-style merging.

Site naming uses ``mix64((block_addr << 8) ^ instr_ordinal)``: stable across
block rewrites (ordinals survive instrumentation) and across processes (no
randomized hashing anywhere).
"""

from __future__ import annotations

import logging
from bisect import bisect_right

import numpy as np

from .analysis import EQUALITY_OPERATORS, find_comparison_sites
from .pcode import OpCode, PcodeBlock, const, op, reg, skip, tmp

log = logging.getLogger("fuzzemu.plugins")

M64 = (1 << 64) - 1

MAP_SIZE = 65536  # coverage and compare-progress maps, power of two
CMPLOG_SLOTS = 1024
CMPLOG_REC = 24  # lhs u64, rhs u64, width u8, hits u8, 6 pad
ROUTINE_MAP_SIZE = 4096

_CMPLOG_DTYPE = np.dtype(
    [("lhs", "<u8"), ("rhs", "<u8"), ("width", "u1"), ("hits", "u1"), ("pad", "6u1")]
)


def mix64(x: int) -> int:
    """Deterministic 64-bit mixer (splitmix finalizer)."""
    x = (x + 0x9E3779B97F4A7C15) & M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & M64
    return x ^ (x >> 31)


def site_key(block: PcodeBlock, op_index: int) -> int:
    """Stable 64-bit name of the guest instruction owning ops[op_index]."""
    k = bisect_right(block.instr_starts, op_index) - 1
    return mix64((block.guest_addr << 8) ^ k)


# ---------------------------------------------------------------------------
# count bucketing


_CLASS_LUT = np.zeros(256, dtype=np.uint8)
for _lo, _hi, _cls in (
    (0, 0, 0),
    (1, 1, 1),
    (2, 2, 2),
    (3, 3, 4),
    (4, 7, 8),
    (8, 15, 16),
    (16, 31, 32),
    (32, 127, 64),
    (128, 255, 128),
):
    _CLASS_LUT[_lo : _hi + 1] = _cls


def classify_counts(counts: np.ndarray) -> np.ndarray:
    """Bucket raw hit counts into the power-of-two classes used for novelty:
    {0,1,2,3,4-7,8-15,16-31,32-127,128+} -> one bit each."""
    return _CLASS_LUT[counts]


# ---------------------------------------------------------------------------
# shared injection helper


def inject(engine, block: PcodeBlock, insertions) -> PcodeBlock | None:
    """Rewrite `block` with `insertions`: (op_index, [ops]) pairs, each list
    running immediately before the op at op_index.  Instruction starts are
    remapped so injected ops belong to the instruction containing the point.

    Safe under composition because every plugin injects self-contained
    synthetic runs: a non-synthetic insertion point can never fall strictly
    inside another plugin's skip region, so existing skip deltas survive.
    """
    if not insertions:
        return None
    before: dict[int, list] = {}
    for idx, seq in insertions:
        before.setdefault(idx, []).extend(seq)
    new_ops: list = []
    offset_at: list[int] = []  # injected ops at points < i, per old index i
    added = 0
    for i, o in enumerate(block.ops):
        offset_at.append(added)
        extra = before.get(i)
        if extra:
            new_ops.extend(extra)
            added += len(extra)
        new_ops.append(o)
    offset_at.append(added)  # for starts pointing one past the end
    starts = tuple(s + offset_at[s] for s in block.instr_starts)
    return engine.install_rewrite(block, new_ops, starts)


def _bump_ops(t, addr_vn, counter_size: int = 1) -> list:
    """Saturating counter increment at a storage address varnode."""
    c0 = t(counter_size)
    sat = t(1)
    c1 = t(counter_size)
    return [
        op(OpCode.LOAD, c0, addr_vn, synthetic=True),
        op(OpCode.INT_EQUAL, sat, c0, const(255, counter_size), synthetic=True),
        op(OpCode.CBRANCH, None, skip(3), sat, synthetic=True),
        op(OpCode.INT_ADD, c1, c0, const(1, counter_size), synthetic=True),
        op(OpCode.STORE, None, addr_vn, c1, synthetic=True),
    ]


class _TempAlloc:
    """Fresh temp ids above everything the block already uses."""

    def __init__(self, block: PcodeBlock):
        self.next = block.max_temp() + 1

    def __call__(self, size: int = 4):
        self.next += 1
        return tmp(self.next - 1, size)


# ---------------------------------------------------------------------------
# coverage


class CoveragePlugin:
    """AFL-style edge coverage: every block gets a 16-bit name, the map index
    is cur ^ prev (^ ctx when wired to a ContextPlugin), counters saturate at
    255.  block_only drops the prev mixing and counts plain block hits."""

    name = "cov"

    def __init__(self, context: "ContextPlugin | None" = None, block_only: bool = False):
        self.ctx = context
        self.block_only = block_only
        self.prev = None
        self.base = 0
        self.map: bytearray = bytearray()
        self.done: set[int] = set()

    def attach(self, engine):
        self.base, self.map = engine.alloc_storage("cov", MAP_SIZE)
        if not self.block_only:
            self.prev = engine.alloc_reg(4)

    def on_block(self, engine, block):
        if block.guest_addr in self.done:
            return None
        self.done.add(block.guest_addr)
        site = mix64(block.guest_addr << 8) & (MAP_SIZE - 1)
        t = _TempAlloc(block)
        seq = []
        if self.block_only:
            idx4 = const(site, 4)
        else:
            x = t(4)
            seq.append(op(OpCode.INT_XOR, x, reg(self.prev), const(site, 4), synthetic=True))
            if self.ctx is not None:
                xc = t(4)
                seq.append(op(OpCode.INT_XOR, xc, x, reg(self.ctx.reg), synthetic=True))
                x = xc
            m = t(4)
            seq.append(op(OpCode.INT_AND, m, x, const(MAP_SIZE - 1, 4), synthetic=True))
            idx4 = m
        wide = t(8)
        addr = t(8)
        seq.append(op(OpCode.INT_ZEXT, wide, idx4, synthetic=True))
        seq.append(op(OpCode.INT_ADD, addr, wide, const(self.base, 8), synthetic=True))
        seq.extend(_bump_ops(t, addr))
        if not self.block_only:
            seq.append(op(OpCode.COPY, reg(self.prev), const(site >> 1, 4), synthetic=True))
        return inject(engine, block, [(0, seq)])


class ContextPlugin:
    """Call-stack context register: xor a call-site hash before each CALL and
    xor it back at the head of the return-address block, so coverage indices
    distinguish the same code reached through different call sites."""

    name = "ctx"

    def __init__(self):
        self.reg = None
        self.done: set[int] = set()
        self.pending: set[int] = set()  # return addrs expecting a clear
        self.cleared: set[int] = set()  # return addrs whose block has one

    def attach(self, engine):
        self.reg = engine.alloc_reg(4)

    def _hash(self, ret: int) -> int:
        return mix64(ret) & 0xFFFFFFFF

    def _xor(self, h: int):
        return op(OpCode.INT_XOR, reg(self.reg), reg(self.reg), const(h, 4), synthetic=True)

    def _clear_rewrite(self, engine, block, h: int):
        return inject(engine, block, [(0, [self._xor(h)])])

    def on_block(self, engine, block):
        a = block.guest_addr
        if a in self.done:
            return None
        self.done.add(a)
        ins = []
        if a in self.pending:
            ins.append((0, [self._xor(self._hash(a))]))
            self.cleared.add(a)
        last = block.ops[-1]
        if last.opcode in (OpCode.CALL, OpCode.CALLIND) and not last.synthetic:
            ret = a + block.byte_len
            ins.append((len(block.ops) - 1, [self._xor(self._hash(ret))]))
            self.pending.add(ret)
            if ret in self.done and ret not in self.cleared:
                # return block was lifted first (or reached only through an
                # overlapping call block); patch it out of band exactly once.
                # done keeps its entry so the resweep cannot inject twice.
                self.cleared.add(ret)
                engine.rewrite_block(ret, self._clear_rewrite(engine, engine.blocks[ret], self._hash(ret)))
        return inject(engine, block, ins)


# ---------------------------------------------------------------------------
# comparison operand logging


class CmplogPlugin:
    """Logs both operands of every comparison that steers a guest branch into
    a slot table (last writer wins, hit counts saturate).  With rtn=True the
    first 8 bytes behind the two leading argument registers are captured at
    every call, covering by-reference compares the branch analysis cannot
    see."""

    name = "cmplog"

    def __init__(self, rtn: bool = True):
        self.rtn = rtn
        self.base = 0
        self.buf: bytearray = bytearray()
        self.done: set[int] = set()

    def attach(self, engine):
        self.base, self.buf = engine.alloc_storage("cmplog", CMPLOG_SLOTS * CMPLOG_REC)

    def _slot(self, key: int) -> int:
        return key & (CMPLOG_SLOTS - 1)

    def on_block(self, engine, block):
        if block.guest_addr in self.done:
            return None
        self.done.add(block.guest_addr)
        ins = []
        t = _TempAlloc(block)
        seen_ops: set[int] = set()
        for s in find_comparison_sites(block):
            if s.op_index in seen_ops:  # one log per comparison, not per branch
                continue
            seen_ops.add(s.op_index)
            rec = self.base + self._slot(site_key(block, s.op_index)) * CMPLOG_REC
            seq = []
            for off, vn in ((0, s.lhs), (8, s.rhs)):
                if vn.size < 8:
                    w = t(8)
                    seq.append(op(OpCode.INT_ZEXT, w, vn, synthetic=True))
                else:
                    w = vn
                seq.append(op(OpCode.STORE, None, const(rec + off, 8), w, synthetic=True))
            wv = t(1)
            seq.append(op(OpCode.COPY, wv, const(s.width, 1), synthetic=True))
            seq.append(op(OpCode.STORE, None, const(rec + 16, 8), wv, synthetic=True))
            seq.extend(_bump_ops(t, const(rec + 17, 8)))
            ins.append((s.op_index, seq))
        last = block.ops[-1]
        if self.rtn and last.opcode in (OpCode.CALL, OpCode.CALLIND) and not last.synthetic:
            rec = self.base + self._slot(mix64(block.guest_addr << 8)) * CMPLOG_REC
            marker = engine.add_hook(lambda eng, rec=rec: self._call_hook(eng, rec))
            ins.append((len(block.ops) - 1, [op(OpCode.ENVCALL, None, const(marker, 8), synthetic=True)]))
        return inject(engine, block, ins)

    def _call_hook(self, engine, rec: int):
        a = engine.mmu.peek(engine.regs[10], 8)
        b = engine.mmu.peek(engine.regs[11], 8)
        if a is None or b is None:
            return
        off = rec - self.base
        buf = self.buf
        buf[off : off + 8] = a
        buf[off + 8 : off + 16] = b
        buf[off + 16] = 8
        if buf[off + 17] < 255:
            buf[off + 17] += 1

    def pairs(self) -> list[tuple[int, int, int, int]]:
        """Live slots from the last execution: (lhs, rhs, width, hits)."""
        rows = np.frombuffer(self.buf, dtype=_CMPLOG_DTYPE)
        live = rows[rows["hits"] > 0]
        return [(int(r["lhs"]), int(r["rhs"]), int(r["width"]), int(r["hits"])) for r in live]


# ---------------------------------------------------------------------------
# sub-operand compare progress


class CompareCovPlugin:
    """Progress feedback for multi-byte equality compares: for every low
    prefix of 1..width-1 bytes, a saturating counter fires when the prefix
    matches, giving the fuzzer a gradient through wide constants without
    knowing the operand values."""

    name = "compcov"

    def __init__(self):
        self.base = 0
        self.map: bytearray = bytearray()
        self.done: set[int] = set()

    def attach(self, engine):
        self.base, self.map = engine.alloc_storage("compcov", MAP_SIZE)

    def on_block(self, engine, block):
        if block.guest_addr in self.done:
            return None
        self.done.add(block.guest_addr)
        ins = []
        t = _TempAlloc(block)
        seen_ops: set[int] = set()
        for s in find_comparison_sites(block):
            if s.operator not in EQUALITY_OPERATORS or s.width < 2 or s.op_index in seen_ops:
                continue
            seen_ops.add(s.op_index)
            key = site_key(block, s.op_index)
            seq = []
            x = t(s.width)
            seq.append(op(OpCode.INT_XOR, x, s.lhs, s.rhs, synthetic=True))
            for k in range(1, s.width):
                idx = (key + k - 1) & (MAP_SIZE - 1)
                cell = const(self.base + idx, 8)
                m = t(s.width)
                z = t(1)
                nz = t(1)
                seq.append(op(OpCode.INT_AND, m, x, const((1 << (8 * k)) - 1, s.width), synthetic=True))
                seq.append(op(OpCode.INT_EQUAL, z, m, const(0, s.width), synthetic=True))
                seq.append(op(OpCode.BOOL_NEGATE, nz, z, synthetic=True))
                seq.append(op(OpCode.CBRANCH, None, skip(6), nz, synthetic=True))
                seq.extend(_bump_ops(t, cell))
            ins.append((s.op_index, seq))
        return inject(engine, block, ins)


# ---------------------------------------------------------------------------
# well-known compare routines


class CmpRoutinePlugin:
    """Hooks memcmp/strcmp/strncmp by symbol: counts matching leading bytes
    into a small map (one index per match length) and feeds the first 8 bytes
    of both sides to cmplog.  Stripped targets get a warning and show up in
    stats, nothing else breaks."""

    name = "routines"

    ROUTINES = ("memcmp", "strcmp", "strncmp")
    CAP = 64

    def __init__(self, cmplog: CmplogPlugin | None = None):
        self.cmplog = cmplog
        self.base = 0
        self.map: bytearray = bytearray()
        self.done: set[int] = set()
        self.targets: dict[int, str] = {}
        self.stats = {"hooked": [], "missing": [], "calls": 0}

    def attach(self, engine):
        self.base, self.map = engine.alloc_storage("routinecov", ROUTINE_MAP_SIZE)
        for rname in self.ROUTINES:
            addr = engine.symbols.get(rname)
            if addr is None:
                self.stats["missing"].append(rname)
            else:
                self.targets[addr] = rname
                self.stats["hooked"].append(rname)
        if self.stats["missing"]:
            log.warning("compare routines not in symbol table: %s", ", ".join(self.stats["missing"]))

    def on_block(self, engine, block):
        a = block.guest_addr
        if a in self.done:
            return None
        self.done.add(a)
        rname = self.targets.get(a)
        if rname is None:
            return None
        marker = engine.add_hook(lambda eng, rname=rname, entry=a: self._hit(eng, rname, entry))
        head = [op(OpCode.ENVCALL, None, const(marker, 8), synthetic=True)]
        return inject(engine, block, [(0, head)])

    def _peek(self, engine, addr: int, n: int) -> bytes | None:
        out = b""
        while len(out) < n:
            chunk = engine.mmu.peek(addr + len(out), min(8, n - len(out)))
            if chunk is None:
                return None if not out else out
            out += chunk
        return out

    def _hit(self, engine, rname: str, entry: int):
        self.stats["calls"] += 1
        r = engine.regs
        n = self.CAP if rname == "strcmp" else min(r[12], self.CAP)
        if n <= 0:
            return
        a = self._peek(engine, r[10], n)
        b = self._peek(engine, r[11], n)
        if not a or not b:
            return
        m = 0
        limit = min(len(a), len(b))
        while m < limit and a[m] == b[m]:
            if rname == "strcmp" and a[m] == 0:
                break
            m += 1
        idx = (mix64(entry) + m) & (ROUTINE_MAP_SIZE - 1)
        if self.map[idx] < 255:
            self.map[idx] += 1
        if self.cmplog is not None:
            rec = self.cmplog._slot(mix64(entry ^ (r[1] << 8))) * CMPLOG_REC
            buf = self.cmplog.buf
            width = min(8, n)
            buf[rec : rec + 8] = a[:8].ljust(8, b"\0")
            buf[rec + 8 : rec + 16] = b[:8].ljust(8, b"\0")
            buf[rec + 16] = width
            if buf[rec + 17] < 255:
                buf[rec + 17] += 1


# ---------------------------------------------------------------------------
# map dump files: 16-byte header (magic u32, version u32, size u64), raw bytes


DUMP_VERSION = 1
COV_MAGIC = int.from_bytes(b"FZCV", "little")
CMPLOG_MAGIC = int.from_bytes(b"FZCL", "little")


def write_map(path: str, payload: bytes, magic: int) -> None:
    with open(path, "wb") as f:
        f.write(magic.to_bytes(4, "little"))
        f.write(DUMP_VERSION.to_bytes(4, "little"))
        f.write(len(payload).to_bytes(8, "little"))
        f.write(payload)


def read_map(path: str, magic: int) -> bytes:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or int.from_bytes(head[0:4], "little") != magic:
            raise ValueError(f"{path}: bad dump magic")
        if int.from_bytes(head[4:8], "little") != DUMP_VERSION:
            raise ValueError(f"{path}: unsupported dump version")
        size = int.from_bytes(head[8:16], "little")
        payload = f.read(size)
        if len(payload) != size:
            raise ValueError(f"{path}: truncated dump")
        return payload
