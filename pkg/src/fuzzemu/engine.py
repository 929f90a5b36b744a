"""Execution engine: lifts guest code block by block, lets instrumentation
plugins rewrite the IR, then runs each block as a generated Python function.

Pipeline per new block address: lift -> optimize -> plugin sweep -> compile.
Plugins only ever see and rewrite IR; they never deal with guest encodings.
The optimizer runs once, before injection, so plugin-injected ops are never
folded away or re-indexed behind a plugin's back.

A slower op-by-op interpreter backs two cases: blocks whose injected skips do
not nest into structured Python, and the final block of a run when the
remaining instruction budget is smaller than the block (budget accounting is
per guest instruction and must stop exactly on the boundary).

Plugin-visible extras:
  * custom registers (ids >= 32) live next to the guest registers,
  * storage areas are engine-side byte buffers addressed at >= 2**63 through
    ordinary LOAD/STORE (a 32-bit guest cannot form such addresses),
  * hook markers turn injected ENVCALL ops into Python callbacks.

The environment call interface (guest `ecall`, selector in x17):
  0: exit with code x10      1: write byte x10 to stdout
  2: x10 = remaining input bytes     anything else crashes.
An `ebreak` is a debug trap and reports as a crash.  Fuzz input is served by a
16-byte peripheral at env_base: read offset 0 consumes input (zero filled once
exhausted), offset 4 reads the remaining count, a write to offset 8 crashes
(handy for targets that want an explicit non-memory crash), everything else
faults.
"""

from __future__ import annotations

import json
import os
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

from .asm import _ABI
from .mmu import FaultKind, MemFault, Mmu, Perm, parse_perms
from .pcode import (
    AddressSpace,
    OpCode,
    PcodeBlock,
    eval_op,
    mask,
    optimize_block,
    validate_block,
)
from .riscv import EBREAK_MARKER, Lifter

STORAGE_BASE = 1 << 63  # storage area i occupies [BASE + (i<<32), BASE + ((i+1)<<32))
HOOK_BASE = 1 << 20
DEFAULT_BUDGET = 5_000_000
MAX_GENERATIONS = 64

ENV_EXIT = 0
ENV_PUTCHAR = 1
ENV_INPUT_LEFT = 2


class EngineError(Exception):
    pass


class EngineSignal(Exception):
    """Base for exceptions that unwind out of generated block code."""


class GuestExit(EngineSignal):
    def __init__(self, code: int):
        super().__init__(f"guest exit {code}")
        self.code = code


class GuestCrash(EngineSignal):
    def __init__(self, kind: str, detail: int | None = None):
        super().__init__(f"guest crash: {kind}")
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class CrashInfo:
    kind: str  # mem-unmapped | mem-perm | mem-uninit | invalid | ebreak | envcall | crash-port
    pc: int
    addr: int | None = None
    access: str | None = None
    detail: int | None = None

    def key(self) -> tuple:
        return (self.kind, self.access, self.addr, self.pc)


@dataclass
class ExecResult:
    status: str  # exit | crash | hang
    steps: int
    pc: int
    exit_code: int | None = None
    crash: CrashInfo | None = None
    stdout: bytes = b""

    @property
    def crashed(self) -> bool:
        return self.status == "crash"


# ---------------------------------------------------------------------------
# target description


@dataclass
class Region:
    name: str
    start: int
    size: int
    perms: Perm
    data: bytes | None = None


@dataclass
class Target:
    name: str
    entry: int
    regions: list[Region]
    env_base: int | None = None
    symbols: dict[str, int] = field(default_factory=dict)
    regs: dict[int, int] = field(default_factory=dict)


def _num(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def load_target(path: str) -> Target:
    """Read a JSON target description; $file paths are relative to it."""
    with open(path) as fh:
        doc = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(path))
    regions = []
    for r in doc["regions"]:
        data = None
        if "file" in r:
            with open(os.path.join(base_dir, r["file"]), "rb") as fh:
                data = fh.read()[_num(r.get("offset", 0)):]
        regions.append(
            Region(r.get("name", "?"), _num(r["start"]), _num(r["size"]), parse_perms(r["perms"]), data)
        )
    regs = {}
    for name, v in doc.get("regs", {}).items():
        key = name.lower()
        rid = _ABI[key] if key in _ABI else int(key.lstrip("x"))
        regs[rid] = _num(v)
    return Target(
        name=doc.get("name", os.path.basename(path)),
        entry=_num(doc["entry"]),
        regions=regions,
        env_base=_num(doc["env_base"]) if "env_base" in doc else None,
        symbols={k: _num(v) for k, v in doc.get("symbols", {}).items()},
        regs=regs,
    )


# ---------------------------------------------------------------------------
# engine


class Engine:
    def __init__(
        self,
        mmu: Mmu,
        entry: int,
        plugins: tuple = (),
        env_base: int | None = None,
        symbols: dict[str, int] | None = None,
        reg_inits: dict[int, int] | None = None,
        budget: int = DEFAULT_BUDGET,
        lifter: Lifter | None = None,
    ):
        self.mmu = mmu
        self.entry = entry
        self.symbols = dict(symbols or {})
        self.budget = budget
        self.lifter = lifter or Lifter()

        self.regs: list[int] = [0] * 32
        for rid, v in (reg_inits or {}).items():
            if rid:
                self.regs[rid] = v & 0xFFFFFFFF
        self.reg_sizes: dict[int, int] = {}
        self.pc = entry
        self.stdout = bytearray()
        self._input = b""
        self._input_pos = 0

        self.env_base = env_base
        if env_base is not None:
            mmu.map_mmio(env_base, 16, Perm.R | Perm.W, self._input_read, self._input_write)

        self.blocks: dict[int, PcodeBlock] = {}
        self._code: dict[int, tuple[int, object]] = {}  # addr -> (generation, fn or None)
        self._storages: list[bytearray] = []
        self._storage_names: list[str] = []
        self._hooks: list = []
        self._next_reg = 32

        self.exec_count = 0
        self._sealed = False
        self._snap_mmu = None
        self._snap_regs: list[int] = []

        self.plugins = tuple(plugins)
        names = [p.name for p in self.plugins]
        if len(set(names)) != len(names):
            raise EngineError(f"duplicate plugin names: {names}")
        self._seen: dict[str, set] = {p.name: set() for p in self.plugins}
        self._sweep = None
        for p in self.plugins:
            p.attach(self)

    @classmethod
    def from_target(cls, target: Target, plugins: tuple = (), **kw) -> "Engine":
        mmu = Mmu(strict_uninit=kw.pop("strict_uninit", False))
        for r in target.regions:
            mmu.map_ram(r.start, r.size, r.perms, r.data)
        return cls(
            mmu,
            target.entry,
            plugins=plugins,
            env_base=target.env_base,
            symbols=target.symbols,
            reg_inits=target.regs,
            **kw,
        )

    # -- plugin registration ----------------------------------------------

    def alloc_reg(self, size: int) -> int:
        """Allocate a custom register (id >= 32), zeroed at exec start."""
        if self._sealed:
            raise EngineError("cannot allocate registers after first run")
        rid = self._next_reg
        self._next_reg += 1
        self.reg_sizes[rid] = size
        self.regs.append(0)
        return rid

    def alloc_storage(self, name: str, size: int) -> tuple[int, bytearray]:
        """Allocate an engine-side byte buffer reachable via LOAD/STORE at the
        returned base address; zeroed at exec start."""
        if self._sealed:
            raise EngineError("cannot allocate storage after first run")
        buf = bytearray(size)
        base = STORAGE_BASE + (len(self._storages) << 32)
        self._storages.append(buf)
        self._storage_names.append(name)
        return base, buf

    def add_hook(self, fn) -> int:
        """Register a callback; injected `ENVCALL #marker` ops invoke it."""
        marker = HOOK_BASE + len(self._hooks)
        self._hooks.append(fn)
        return marker

    # -- memory/environment closures used by generated code ----------------

    def _mem_read(self, addr: int, size: int) -> int:
        if addr >= STORAGE_BASE:
            buf = self._storages[(addr - STORAGE_BASE) >> 32]
            off = addr & 0xFFFFFFFF
            if off + size > len(buf):
                raise EngineError(f"storage read out of range: +{off:#x}")
            return int.from_bytes(buf[off : off + size], "little")
        return self.mmu.read(addr, size)

    def _mem_write(self, addr: int, size: int, value: int) -> None:
        if addr >= STORAGE_BASE:
            buf = self._storages[(addr - STORAGE_BASE) >> 32]
            off = addr & 0xFFFFFFFF
            if off + size > len(buf):
                raise EngineError(f"storage write out of range: +{off:#x}")
            buf[off : off + size] = (value & mask(size)).to_bytes(size, "little")
            return
        self.mmu.write(addr, size, value)

    def _env(self, marker: int) -> None:
        if marker >= HOOK_BASE:
            self._hooks[marker - HOOK_BASE](self)
            return
        if marker == EBREAK_MARKER:
            raise GuestCrash("ebreak")
        R = self.regs
        sel = R[17]
        if sel == ENV_EXIT:
            raise GuestExit(R[10])
        if sel == ENV_PUTCHAR:
            self.stdout.append(R[10] & 0xFF)
        elif sel == ENV_INPUT_LEFT:
            R[10] = (len(self._input) - self._input_pos) & 0xFFFFFFFF
        else:
            raise GuestCrash("envcall", detail=sel)

    def _input_read(self, off: int, size: int) -> int:
        if off == 0:
            pos = self._input_pos
            chunk = self._input[pos : pos + size]
            self._input_pos = pos + size
            return int.from_bytes(chunk, "little")  # short reads zero-extend
        if off == 4:
            return max(len(self._input) - self._input_pos, 0) & mask(size)
        raise MemFault(FaultKind.PERM, self.env_base + off, "read", size)

    def _input_write(self, off: int, size: int, value: int) -> None:
        if off == 8:
            raise GuestCrash("crash-port", detail=value)
        raise MemFault(FaultKind.PERM, self.env_base + off, "write", size)

    # -- block management ---------------------------------------------------

    def get_block(self, addr: int) -> PcodeBlock:
        blk = self.blocks.get(addr)
        if blk is None:
            raw = self.lifter.lift_block(self.mmu.fetch, addr)  # may fault
            blk = optimize_block(raw)
            self.blocks[addr] = blk
            self._notify(addr)
            blk = self.blocks[addr]
        return blk

    def _notify(self, addr: int) -> None:
        """Show new block generations to plugins; rewrites enqueue the next
        generation, and no plugin sees the same (addr, generation) twice.
        Re-entrant calls (from rewrite_block inside on_block) join the active
        sweep instead of nesting."""
        if self._sweep is not None:
            self._sweep.append(addr)
            return
        self._sweep = deque([addr])
        try:
            while self._sweep:
                a = self._sweep.popleft()
                progressed = True
                while progressed:
                    progressed = False
                    blk = self.blocks[a]
                    for p in self.plugins:
                        key = (a, blk.generation)
                        if key in self._seen[p.name]:
                            continue
                        self._seen[p.name].add(key)
                        new = p.on_block(self, blk)
                        if new is not None:
                            if new.generation >= MAX_GENERATIONS:
                                raise EngineError(f"plugin {p.name} keeps rewriting block {a:#x}")
                            validate_block(new, self.reg_sizes)
                            self.blocks[a] = new
                            progressed = True
                            break
        finally:
            self._sweep = None

    def rewrite_block(self, addr: int, new: PcodeBlock) -> None:
        """Install a plugin rewrite of some other, already-notified block (for
        the block handed to on_block, return the rewrite instead).  The block
        is re-swept so every plugin sees the new generation exactly once."""
        if new.generation >= MAX_GENERATIONS:
            raise EngineError(f"block {addr:#x} rewritten too many times")
        validate_block(new, self.reg_sizes)
        self.blocks[addr] = new
        self._notify(addr)

    def install_rewrite(self, block: PcodeBlock, new_ops: list, new_starts: tuple | None = None) -> PcodeBlock:
        """Helper for plugins: same block identity, next generation."""
        return PcodeBlock(
            block.guest_addr,
            list(new_ops),
            block.byte_len,
            tuple(new_starts) if new_starts is not None else block.instr_starts,
            block.generation + 1,
        )

    # -- execution ----------------------------------------------------------

    def seal(self) -> None:
        """Freeze the reset state: current MMU contents and registers."""
        if not self._sealed:
            self._sealed = True
            self._snap_mmu = self.mmu.snapshot()
            self._snap_regs = list(self.regs)

    def execute(self, data: bytes, budget: int | None = None) -> ExecResult:
        self.seal()
        self.mmu.restore(self._snap_mmu)
        self.regs[:] = self._snap_regs
        self.pc = self.entry
        self.stdout.clear()
        self._input = bytes(data)
        self._input_pos = 0
        for buf in self._storages:
            buf[:] = bytes(len(buf))
        for p in self.plugins:
            start = getattr(p, "on_exec_start", None)
            if start:
                start(self)

        limit = self.budget if budget is None else budget
        steps = 0
        result = None
        try:
            while True:
                if steps >= limit:
                    result = ExecResult("hang", steps, self.pc)
                    break
                blk = self.get_block(self.pc)
                fn = self._fn_for(blk) if limit - steps >= blk.instr_count else None
                if fn is None:
                    next_pc, retired, stop_pc = self._interpret(blk, limit - steps)
                    steps += retired
                    if next_pc is None:
                        result = ExecResult("hang", steps, stop_pc)
                        break
                    self.pc = next_pc
                else:
                    self.pc = fn()
                    steps += blk.instr_count
        except GuestExit as e:
            steps += getattr(e, "retired", 0)
            result = ExecResult("exit", steps, getattr(e, "guest_pc", self.pc), exit_code=e.code)
        except GuestCrash as e:
            steps += getattr(e, "retired", 0)
            pc = getattr(e, "guest_pc", self.pc)
            result = ExecResult("crash", steps, pc, crash=CrashInfo(e.kind, pc, detail=e.detail))
        except MemFault as e:
            steps += getattr(e, "retired", 0)
            pc = getattr(e, "guest_pc", self.pc)
            result = ExecResult(
                "crash",
                steps,
                pc,
                crash=CrashInfo(f"mem-{e.kind.name.lower()}", pc, addr=e.addr, access=e.access),
            )
        result.stdout = bytes(self.stdout)
        self.exec_count += 1
        for p in self.plugins:
            end = getattr(p, "on_exec_end", None)
            if end:
                end(self, result)
        return result

    # -- interpreter ---------------------------------------------------------

    def _interpret(self, blk: PcodeBlock, limit: int):
        """Run one block op by op with exact per-instruction budgeting.

        Returns (next_pc, retired, stop_pc); next_pc None means the budget ran
        out at stop_pc.  Faults are annotated with guest pc and retired count.
        """
        ops = blk.ops
        starts = blk.instr_starts
        R = self.regs
        temps: dict[int, int] = {}
        rd_mem = self._mem_read
        wr_mem = self._mem_write
        consumed = 0
        cur_instr = -1
        i = 0
        try:
            while i < len(ops):
                instr = bisect_right(starts, i) - 1
                if instr > cur_instr:
                    cost = instr - cur_instr
                    if consumed + cost > limit:
                        stop = cur_instr + (limit - consumed) + 1
                        return None, limit, blk.guest_addr + 4 * stop
                    consumed += cost
                    cur_instr = instr
                o = ops[i]
                code = o.opcode
                ins = o.inputs

                if code is OpCode.CBRANCH:
                    c = ins[1]
                    cv = c.id if c.space is AddressSpace.CONSTANT else (
                        temps[c.id] if c.space is AddressSpace.TEMP else R[c.id] & mask(c.size)
                    )
                    if cv:
                        t = ins[0]
                        if t.space is AddressSpace.CONSTANT:
                            i += t.id
                            continue
                        return t.id, consumed, None
                    i += 1
                    continue
                if code is OpCode.BRANCH or code is OpCode.CALL:
                    return ins[0].id, consumed, None
                if code in (OpCode.BRANCHIND, OpCode.CALLIND, OpCode.RETURN):
                    t = ins[0]
                    v = t.id if t.space is AddressSpace.CONSTANT else (
                        temps[t.id] if t.space is AddressSpace.TEMP else R[t.id] & mask(t.size)
                    )
                    return v, consumed, None
                if code is OpCode.INVALID:
                    raise GuestCrash("invalid")
                if code is OpCode.ENVCALL:
                    self._env(ins[0].id if ins else 0)
                    i += 1
                    continue

                vals = []
                for vn in ins:
                    if vn.space is AddressSpace.CONSTANT:
                        vals.append(vn.id)
                    elif vn.space is AddressSpace.TEMP:
                        vals.append(temps[vn.id])
                    else:
                        vals.append(R[vn.id] & mask(vn.size))
                if code is OpCode.LOAD:
                    v = rd_mem(vals[0], o.output.size)
                elif code is OpCode.STORE:
                    wr_mem(vals[0], ins[1].size, vals[1])
                    i += 1
                    continue
                else:
                    v = eval_op(code, vals[0], vals[1] if len(vals) > 1 else 0, ins[0].size, o.output.size)
                out = o.output
                if out.space is AddressSpace.TEMP:
                    temps[out.id] = v
                else:
                    R[out.id] = v
                i += 1
            raise EngineError(f"block {blk.guest_addr:#x} ran off the end")
        except (MemFault, EngineSignal) as e:
            e.guest_pc = blk.guest_addr + 4 * max(cur_instr, 0)
            e.retired = consumed if isinstance(e, GuestExit) else max(consumed - 1, 0)
            raise

    # -- code generation ------------------------------------------------------

    def _fn_for(self, blk: PcodeBlock):
        cached = self._code.get(blk.guest_addr)
        if cached is not None and cached[0] == blk.generation:
            return cached[1]
        fn = compile_block(blk, self)
        self._code[blk.guest_addr] = (blk.generation, fn)
        return fn


def _vexpr(vn) -> str:
    if vn.space is AddressSpace.CONSTANT:
        return repr(vn.id)
    if vn.space is AddressSpace.TEMP:
        return f"t{vn.id}"
    return f"R[{vn.id}]"


def _signed(expr: str, size: int) -> str:
    s = 1 << (8 * size - 1)
    return f"(({expr} ^ {s}) - {s})"


def _data_expr(o) -> str:
    """Python expression for one pure data op (operands already masked)."""
    code = o.opcode
    ins = o.inputs
    a = _vexpr(ins[0])
    b = _vexpr(ins[1]) if len(ins) > 1 else None
    in_size = ins[0].size
    out_size = o.output.size
    m = mask(out_size)
    bits = 8 * in_size

    if code is OpCode.COPY or code is OpCode.INT_ZEXT:
        return a
    if code is OpCode.TRUNC:
        return f"({a} & {m})"
    if code is OpCode.INT_ADD:
        return f"(({a} + {b}) & {m})"
    if code is OpCode.INT_SUB:
        return f"(({a} - {b}) & {m})"
    if code is OpCode.INT_MULT:
        return f"(({a} * {b}) & {m})"
    if code is OpCode.INT_AND:
        return f"({a} & {b})"
    if code is OpCode.INT_OR:
        return f"({a} | {b})"
    if code is OpCode.INT_XOR:
        return f"({a} ^ {b})"
    if code is OpCode.INT_LEFT:
        if ins[1].space is AddressSpace.CONSTANT:
            return f"(({a} << {ins[1].id}) & {m})" if ins[1].id < bits else "0"
        return f"((({a} << {b}) & {m}) if {b} < {bits} else 0)"
    if code is OpCode.INT_RIGHT:
        if ins[1].space is AddressSpace.CONSTANT:
            return f"({a} >> {ins[1].id})" if ins[1].id < bits else "0"
        return f"(({a} >> {b}) if {b} < {bits} else 0)"
    if code is OpCode.INT_SRIGHT:
        sa = _signed(a, in_size)
        if ins[1].space is AddressSpace.CONSTANT:
            return f"(({sa} >> {min(ins[1].id, bits)}) & {m})"
        return f"(({sa} >> ({b} if {b} < {bits} else {bits})) & {m})"
    if code is OpCode.INT_EQUAL:
        return f"(1 if {a} == {b} else 0)"
    if code is OpCode.INT_NOTEQUAL:
        return f"(1 if {a} != {b} else 0)"
    if code is OpCode.INT_LESS:
        return f"(1 if {a} < {b} else 0)"
    if code is OpCode.INT_SLESS:
        return f"(1 if {_signed(a, in_size)} < {_signed(b, in_size)} else 0)"
    if code is OpCode.INT_SEXT:
        return f"({_signed(a, in_size)} & {m})"
    if code is OpCode.BOOL_NEGATE:
        return f"(0 if {a} else 1)"
    raise EngineError(f"no expression for {code}")


_FAULTABLE = {OpCode.LOAD, OpCode.STORE, OpCode.ENVCALL, OpCode.INVALID}


def gen_source(blk: PcodeBlock, fn_name: str = "f") -> str | None:
    """Generate Python source for a block, or None if its skips don't nest."""
    ops = blk.ops
    starts = blk.instr_starts

    # instructions whose span contains a faultable op need `ia` updates
    ia_at: dict[int, int] = {}
    faultable = False
    for idx, o in enumerate(ops):
        if o.opcode in _FAULTABLE:
            faultable = True
            instr = bisect_right(starts, idx) - 1
            first = starts[instr]
            ia_at.setdefault(first, instr)

    body: list[str] = []
    indent = 1
    scopes: list[int] = []  # op index where the current `if` bodies end

    def emit(line: str):
        body.append("    " * indent + line)

    for idx, o in enumerate(ops):
        while scopes and scopes[-1] == idx:
            scopes.pop()
            indent -= 1
        if idx in ia_at:
            if scopes:
                return None  # instruction boundary inside a skip scope
            emit(f"ia = {ia_at[idx]}")
        code = o.opcode
        if code is OpCode.CBRANCH:
            target, cond = o.inputs
            if target.space is AddressSpace.CONSTANT:
                close = idx + target.id
                if scopes and close > scopes[-1]:
                    return None  # overlapping skips: interpreter only
                emit(f"if not {_vexpr(cond)}:")
                scopes.append(close)
                indent += 1
                if close == idx + 1:  # empty body
                    emit("pass")
            else:
                emit(f"if {_vexpr(cond)}:")
                emit(f"    return {target.id}")
        elif code is OpCode.BRANCH or code is OpCode.CALL:
            emit(f"return {o.inputs[0].id}")
        elif code in (OpCode.BRANCHIND, OpCode.CALLIND, OpCode.RETURN):
            emit(f"return {_vexpr(o.inputs[0])}")
        elif code is OpCode.ENVCALL:
            marker = o.inputs[0].id if o.inputs else 0
            emit(f"env({marker})")
        elif code is OpCode.INVALID:
            emit("raise GuestCrash('invalid')")
        elif code is OpCode.LOAD:
            emit(f"{_vexpr(o.output)} = ld({_vexpr(o.inputs[0])}, {o.output.size})")
        elif code is OpCode.STORE:
            emit(f"st({_vexpr(o.inputs[0])}, {o.inputs[1].size}, {_vexpr(o.inputs[1])})")
        else:
            emit(f"{_vexpr(o.output)} = {_data_expr(o)}")

    header = f"def {fn_name}(R=R, ld=ld, st=st, env=env):"
    if not faultable:
        return "\n".join([header] + body)
    base = blk.guest_addr
    tail = [
        "    except (MemFault, EngineSignal) as e:",
        f"        e.guest_pc = {base} + 4 * ia",
        "        e.retired = ia + 1 if isinstance(e, GuestExit) else ia",
        "        raise",
    ]
    return "\n".join([header, "    ia = 0", "    try:"] + ["    " + l for l in body] + tail)


def compile_block(blk: PcodeBlock, engine: Engine):
    src = gen_source(blk)
    if src is None:
        return None
    ns = {
        "R": engine.regs,
        "ld": engine._mem_read,
        "st": engine._mem_write,
        "env": engine._env,
        "MemFault": MemFault,
        "EngineSignal": EngineSignal,
        "GuestExit": GuestExit,
        "GuestCrash": GuestCrash,
    }
    exec(compile(src, f"<block {blk.guest_addr:#x} gen{blk.generation}>", "exec"), ns)
    return ns["f"]
