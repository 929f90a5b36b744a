"""Shared test utilities: random well-typed blocks and an independent
straight-line evaluator used as the oracle for optimizer/backend checks."""

from __future__ import annotations

import random
from dataclasses import dataclass

from fuzzemu import pcode
from fuzzemu.pcode import (
    AddressSpace,
    OpCode,
    PcodeBlock,
    PcodeOp,
    VarNode,
    const,
    ram,
    reg,
    tmp,
)

DATA_BIN = sorted(pcode.BIN_OPS, key=lambda c: c.value)
DATA_SHIFT = sorted(pcode.SHIFT_OPS, key=lambda c: c.value)
DATA_CMP = sorted(pcode.CMP_OPS, key=lambda c: c.value)

NREG = 8  # generated blocks touch r0..r7 only


def run_straightline(block: PcodeBlock, regs_in: dict[int, int]) -> dict[int, int]:
    """Evaluate data ops of a straight-line block; stops at the first flow op.

    Independent of the engine: dict state plus pcode.eval_op only.
    """
    regs = dict(regs_in)
    temps: dict[int, int] = {}

    def rd(vn: VarNode) -> int:
        if vn.space is AddressSpace.CONSTANT:
            return vn.id
        if vn.space is AddressSpace.TEMP:
            return temps[vn.id]
        return regs.get(vn.id, 0) & pcode.mask(vn.size)

    for o in block.ops:
        if o.opcode in pcode.FLOW_OPS:
            break
        assert o.opcode in pcode.PURE_OPS, f"oracle cannot run {o.opcode}"
        a = rd(o.inputs[0])
        b = rd(o.inputs[1]) if len(o.inputs) > 1 else 0
        v = pcode.eval_op(o.opcode, a, b, o.inputs[0].size, o.output.size)
        if o.output.space is AddressSpace.TEMP:
            temps[o.output.id] = v
        else:
            regs[o.output.id] = v
    return regs


@dataclass
class BlockExit:
    """How a block left: terminator kind, resolved target, envcall marker."""

    kind: str  # jump | call | callind | branchind | ret | envcall | invalid
    target: int | None = None
    marker: int | None = None
    op_index: int = -1
    resume: int = -1  # op index after an envcall, for callers that continue


def exec_block(block, regs: dict[int, int], mem=None, temps: dict[int, int] | None = None,
               start: int = 0) -> BlockExit:
    """Reference executor for one full block: data ops, memory, skips,
    terminators.  Mutates `regs` (register id -> unsigned value) in place.
    Kept apart from the engine on purpose; shares only pcode.eval_op.
    """
    temps = {} if temps is None else temps
    ops = block.ops

    def rd(vn: VarNode) -> int:
        if vn.space is AddressSpace.CONSTANT:
            return vn.id
        if vn.space is AddressSpace.TEMP:
            return temps[vn.id]
        return regs.get(vn.id, 0) & pcode.mask(vn.size)

    def wr(vn: VarNode, v: int) -> None:
        if vn.space is AddressSpace.TEMP:
            temps[vn.id] = v
        else:
            regs[vn.id] = v

    i = start
    while i < len(ops):
        o = ops[i]
        code = o.opcode
        if code is OpCode.CBRANCH:
            if rd(o.inputs[1]) != 0:
                t = o.inputs[0]
                if t.space is AddressSpace.CONSTANT:
                    i += t.id
                    continue
                return BlockExit("jump", t.id, op_index=i)
        elif code is OpCode.BRANCH:
            return BlockExit("jump", o.inputs[0].id, op_index=i)
        elif code is OpCode.CALL:
            return BlockExit("call", o.inputs[0].id, op_index=i)
        elif code is OpCode.BRANCHIND:
            return BlockExit("branchind", rd(o.inputs[0]), op_index=i)
        elif code is OpCode.CALLIND:
            return BlockExit("callind", rd(o.inputs[0]), op_index=i)
        elif code is OpCode.RETURN:
            return BlockExit("ret", rd(o.inputs[0]), op_index=i)
        elif code is OpCode.INVALID:
            return BlockExit("invalid", op_index=i)
        elif code is OpCode.ENVCALL:
            marker = o.inputs[0].id if o.inputs else 0
            return BlockExit("envcall", marker=marker, op_index=i, resume=i + 1)
        elif code is OpCode.LOAD:
            wr(o.output, mem.read(rd(o.inputs[0]), o.output.size))
        elif code is OpCode.STORE:
            mem.write(rd(o.inputs[0]), o.inputs[1].size, rd(o.inputs[1]))
        else:
            a = rd(o.inputs[0])
            b = rd(o.inputs[1]) if len(o.inputs) > 1 else 0
            wr(o.output, pcode.eval_op(code, a, b, o.inputs[0].size, o.output.size))
        i += 1
    raise AssertionError("block ran off the end")


def random_value(rnd: random.Random, size: int) -> int:
    kind = rnd.randrange(4)
    m = pcode.mask(size)
    if kind == 0:
        return rnd.randrange(0, 256) & m
    if kind == 1:
        return m
    if kind == 2:
        return rnd.getrandbits(8 * size)
    return (1 << (8 * size - 1)) & m  # sign bit


class BlockGen:
    """Random generator of valid straight-line blocks over r0..r7 plus temps."""

    def __init__(self, rnd: random.Random, sizes=(1, 2, 4, 8)):
        self.rnd = rnd
        self.sizes = sizes
        self.next_tmp = 0
        self.pool: list[VarNode] = [reg(i) for i in range(NREG)]

    def operand(self, size: int) -> VarNode:
        cands = [v for v in self.pool if v.size == size]
        if cands and self.rnd.random() < 0.7:
            return self.rnd.choice(cands)
        return const(random_value(self.rnd, size), size)

    def fresh(self, size: int) -> VarNode:
        self.next_tmp += 1
        return tmp(self.next_tmp - 1, size)

    def output(self, size: int) -> VarNode:
        if size == 4 and self.rnd.random() < 0.4:
            return reg(self.rnd.randrange(NREG))
        return self.fresh(size)

    def data_op(self) -> PcodeOp:
        rnd = self.rnd
        kind = rnd.randrange(8)
        if kind < 3:
            code = rnd.choice(DATA_BIN)
            s = rnd.choice(self.sizes)
            o = PcodeOp(code, self.output(s), (self.operand(s), self.operand(s)))
        elif kind == 3:
            code = rnd.choice(DATA_SHIFT)
            s = rnd.choice(self.sizes)
            sh = const(rnd.randrange(0, 8 * s + 9), 4)
            o = PcodeOp(code, self.output(s), (self.operand(s), sh))
        elif kind == 4:
            code = rnd.choice(DATA_CMP)
            s = rnd.choice(self.sizes)
            o = PcodeOp(code, self.output(1), (self.operand(s), self.operand(s)))
        elif kind == 5:
            small, big = sorted(rnd.sample(self.sizes, 2)) if len(self.sizes) > 1 else (1, 4)
            if rnd.random() < 0.5:
                code = rnd.choice((OpCode.INT_ZEXT, OpCode.INT_SEXT))
                o = PcodeOp(code, self.output(big), (self.operand(small),))
            else:
                o = PcodeOp(OpCode.TRUNC, self.output(small), (self.operand(big),))
        elif kind == 6:
            s = rnd.choice(self.sizes)
            o = PcodeOp(OpCode.COPY, self.output(s), (self.operand(s),))
        else:
            o = PcodeOp(OpCode.BOOL_NEGATE, self.output(1), (self.operand(1),))
        if o.output is not None:
            self.pool.append(o.output)
        return o

    def block(self, n_ops: int, addr: int = 0x1000, branchy: bool = False) -> PcodeBlock:
        ops = [self.data_op() for _ in range(n_ops)]
        if branchy:
            cond = self.operand(1)
            if cond.space is AddressSpace.CONSTANT:
                c = PcodeOp(OpCode.INT_NOTEQUAL, self.fresh(1), (self.operand(4), self.operand(4)))
                ops.append(c)
                cond = c.output
            ops.append(PcodeOp(OpCode.CBRANCH, None, (ram(addr + 0x100), cond)))
        ops.append(PcodeOp(OpCode.BRANCH, None, (ram(addr + 0x200),)))
        blk = PcodeBlock(addr, ops, 4 * len(ops), tuple(range(len(ops))))
        pcode.validate_block(blk)
        return blk


def random_block(seed: int, n_ops: int = 12, sizes=(1, 2, 4, 8), branchy: bool = False) -> PcodeBlock:
    rnd = random.Random(seed)
    return BlockGen(rnd, sizes).block(rnd.randrange(1, n_ops + 1), branchy=branchy)


def random_regs(seed: int) -> dict[int, int]:
    rnd = random.Random(seed)
    return {i: random_value(rnd, 4) for i in range(NREG)}


# ---------------------------------------------------------------------------
# random guest programs for differential runs


def build_random_program(rnd: random.Random, n: int, code: int, data: int, data_size: int,
                         exclude_rd: tuple = (8, 9)) -> bytes:
    """Random RV32I words with only forward control flow and pinned base regs.

    x8 and x9 hold data pointers and are never written, so memory accesses stay
    inside the mapped data region; the last instruction is always ecall.
    """
    from fuzzemu import asm

    words = []
    for i in range(n - 1):
        kind = rnd.randrange(20)
        rd = rnd.choice([r for r in range(32) if r not in exclude_rd])
        rs1, rs2 = rnd.randrange(32), rnd.randrange(32)
        if kind < 7:
            mnem = rnd.choice(list(asm._I_OPS))
            words.append(asm.enc_i(0x13, asm._I_OPS[mnem], rd, rs1, rnd.randrange(-2048, 2048)))
        elif kind < 11:
            mnem = rnd.choice(list(asm._R_OPS))
            f3, f7 = asm._R_OPS[mnem]
            words.append(asm.enc_r(0x33, f3, f7, rd, rs1, rs2))
        elif kind < 12:
            mnem, (f3, f7) = rnd.choice(list(asm._SHIFT_OPS.items()))
            words.append(asm.enc_r(0x13, f3, f7, rd, rs1, rnd.randrange(32)))
        elif kind < 14:
            f3 = rnd.choice(list(asm._LOADS.values()))
            off = rnd.randrange(0, data_size // 2 - 8)  # x9 sits mid-region
            words.append(asm.enc_i(0x03, f3, rd, rnd.choice((8, 9)), off))
        elif kind < 16:
            f3 = rnd.choice(list(asm._STORES.values()))
            off = rnd.randrange(0, data_size // 2 - 8)
            words.append(asm.enc_s(0x23, f3, rnd.choice((8, 9)), rs2, off))
        elif kind < 18:
            f3 = rnd.choice(list(asm._BRANCHES.values()))
            remaining = n - 1 - i
            delta = 4 * rnd.randrange(1, min(remaining, 64) + 1)
            words.append(asm.enc_b(f3, rs1, rs2, delta))
        elif kind == 18:
            remaining = n - 1 - i
            delta = 4 * rnd.randrange(1, min(remaining, 64) + 1)
            words.append(asm.enc_j(rnd.choice((0, 1, 5)), delta))
        else:
            words.append(asm.enc_u(rnd.choice((0x37, 0x17)), rd, rnd.randrange(1 << 20)))
    words.append(0x00000073)  # ecall
    return b"".join(w.to_bytes(4, "little") for w in words)


def fresh_state(rnd: random.Random, code: int, data: int, data_size: int, image: bytes):
    """MMU with code+data regions and a random register file (x8/x9 pinned to
    the data region, x17 pinned off the handled envcall selectors)."""
    from fuzzemu.mmu import Mmu, Perm

    m = Mmu()
    m.map_ram(code, 0x1000, Perm.R | Perm.X, image)
    payload = bytes(rnd.randrange(256) for _ in range(data_size))
    m.map_ram(data, data_size, Perm.R | Perm.W, payload)
    regs = {i: rnd.getrandbits(32) for i in range(1, 32)}
    regs[0] = 0
    regs[8] = data
    regs[9] = data + data_size // 2
    regs[17] = 99
    return m, regs


# ---------------------------------------------------------------------------
# comparison-analysis fixtures


def random_cmp_block(rnd: random.Random, addr: int = 0x2000):
    """Block dense in comparison wiring: plain compares, subtract-vs-zero and
    widened-flag-vs-zero idioms, copy/negate chains, guest CBRANCHes, plus
    arithmetic noise.  No memory ops or skips, temps defined before first use,
    so replay needs only registers.  Returns (block, reg_inits).
    """
    ops: list[PcodeOp] = []
    next_t = 0

    def t(size: int = 4) -> VarNode:
        nonlocal next_t
        next_t += 1
        return tmp(next_t - 1, size)

    data = [reg(i) for i in range(1, 13)]
    bools: list[VarNode] = []
    n_branch = 0
    small = (0, 1, 2, 0x7F, 0xFF, 0x8000_0000)

    def operand() -> VarNode:
        r = rnd.random()
        if r < 0.15:
            return const(rnd.choice(small), 4)
        if r < 0.3:
            return const(rnd.getrandbits(32), 4)
        return rnd.choice(data)

    def emit_cmp() -> None:
        o = t(1)
        ops.append(pcode.op(rnd.choice(DATA_CMP), o, rnd.choice(data), operand()))
        bools.append(o)

    emit_cmp()  # never start branch-starved
    for _ in range(rnd.randrange(6, 20)):
        roll = rnd.random()
        if roll < 0.2:  # arithmetic noise, half into registers
            out = reg(rnd.randrange(1, 13)) if rnd.random() < 0.5 else t(4)
            ops.append(pcode.op(rnd.choice(DATA_BIN), out, rnd.choice(data), operand()))
            if out.space is AddressSpace.TEMP:
                data.append(out)
        elif roll < 0.4:
            emit_cmp()
        elif roll < 0.5:  # subtract later tested against zero
            s = t(4)
            ops.append(pcode.op(OpCode.INT_SUB, s, rnd.choice(data), operand()))
            o = t(1)
            code = rnd.choice((OpCode.INT_EQUAL, OpCode.INT_NOTEQUAL))
            ops.append(pcode.op(code, o, s, const(0, 4)))
            bools.append(o)
        elif roll < 0.6:  # flag widened then tested against zero
            z = t(4)
            ops.append(pcode.op(OpCode.INT_ZEXT, z, rnd.choice(bools)))
            o = t(1)
            code = rnd.choice((OpCode.INT_EQUAL, OpCode.INT_NOTEQUAL))
            ops.append(pcode.op(code, o, z, const(0, 4)))
            bools.append(o)
        elif roll < 0.75:
            o = t(1)
            ops.append(pcode.op(OpCode.BOOL_NEGATE, o, rnd.choice(bools)))
            bools.append(o)
        elif roll < 0.9:
            o = t(1)
            ops.append(pcode.op(OpCode.COPY, o, rnd.choice(bools)))
            bools.append(o)
        else:
            n_branch += 1
            target = ram(addr + 0x1000 + 0x10 * n_branch)
            ops.append(pcode.op(OpCode.CBRANCH, None, target, rnd.choice(bools)))
    ops.append(pcode.op(OpCode.CBRANCH, None, ram(addr + 0x2000), rnd.choice(bools)))
    ops.append(pcode.op(OpCode.BRANCH, None, ram(addr + 0x3000)))
    blk = PcodeBlock(addr, ops, 4 * len(ops), tuple(range(len(ops))))
    pcode.validate_block(blk)
    regs = {}
    for i in range(1, 13):
        regs[i] = rnd.choice(small) if rnd.random() < 0.4 else rnd.getrandbits(32)
    return blk, regs


def check_sites_hold(block: PcodeBlock, regs: dict[int, int], sites,
                     assume_fallthrough: bool = False) -> int:
    """Evaluate a memory-free block, asserting every comparison site predicts
    the condition of its branch.  Operands are sampled right before the op at
    site.op_index, the contract instrumentation relies on.  Returns the number
    of checks performed (branches past a taken one are never reached).

    With assume_fallthrough, taken CBRANCHes do not stop evaluation: data ops
    keep defining state exactly as on the fall-through path (CBRANCH has no
    side effects), so every site gets checked on every call.
    """
    from fuzzemu.analysis import holds

    temps: dict[int, int] = {}

    def rd(vn: VarNode) -> int:
        if vn.space is AddressSpace.CONSTANT:
            return vn.id
        if vn.space is AddressSpace.TEMP:
            return temps[vn.id]
        return regs.get(vn.id, 0) & pcode.mask(vn.size)

    by_op: dict[int, list] = {}
    by_branch: dict[int, list] = {}
    for s in sites:
        by_op.setdefault(s.op_index, []).append(s)
        by_branch.setdefault(s.branch_index, []).append(s)

    sampled = {}
    checked = 0
    for idx, o in enumerate(block.ops):
        for s in by_op.get(idx, ()):
            sampled[(s.op_index, s.lhs, s.rhs)] = (rd(s.lhs), rd(s.rhs))
        if o.opcode is OpCode.CBRANCH:
            cond = rd(o.inputs[1]) != 0
            for s in by_branch.get(idx, ()):
                a, b = sampled[(s.op_index, s.lhs, s.rhs)]
                assert holds(s.operator, a, b, s.width) == cond, (s, a, b, cond)
                checked += 1
            if cond and not assume_fallthrough:
                assert o.inputs[0].space is not AddressSpace.CONSTANT
                break
            continue
        if o.opcode in pcode.FINAL_OPS:
            break
        if o.output is None:
            continue
        a = rd(o.inputs[0])
        b = rd(o.inputs[1]) if len(o.inputs) > 1 else 0
        v = pcode.eval_op(o.opcode, a, b, o.inputs[0].size, o.output.size)
        if o.output.space is AddressSpace.TEMP:
            temps[o.output.id] = v
        else:
            regs[o.output.id] = v
    return checked
