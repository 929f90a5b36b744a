"""Plain RV32I reference interpreter, used only as a differential-testing
oracle.  It shares nothing with the decoder or lifter: field slicing and
instruction semantics are written out directly so the two paths can disagree.
"""

from __future__ import annotations

from .mmu import Mmu

M32 = 0xFFFFFFFF


class OracleInvalid(Exception):
    def __init__(self, pc: int, word: int):
        super().__init__(f"invalid instruction {word:#010x} at {pc:#x}")
        self.pc = pc
        self.word = word


class OracleEnv(Exception):
    """ecall/ebreak reached; the oracle does not model the environment."""

    def __init__(self, pc: int, kind: str):
        super().__init__(f"{kind} at {pc:#x}")
        self.pc = pc
        self.kind = kind


def _s(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def _sx(v: int, bits: int) -> int:
    return v - (1 << bits) if v & (1 << (bits - 1)) else v


class OracleCpu:
    def __init__(self, pc: int = 0):
        self.regs = [0] * 32
        self.pc = pc

    def _set(self, rd: int, value: int) -> None:
        if rd:
            self.regs[rd] = value & M32

    def step(self, mem: Mmu) -> None:
        """Execute exactly one instruction; faults from `mem` propagate."""
        pc = self.pc
        w = int.from_bytes(mem.fetch(pc, 4), "little")
        opc = w & 0x7F
        rd = (w >> 7) & 0x1F
        f3 = (w >> 12) & 0x7
        rs1v = self.regs[(w >> 15) & 0x1F]
        rs2v = self.regs[(w >> 20) & 0x1F]
        i_imm = _sx(w >> 20, 12)
        next_pc = (pc + 4) & M32

        if opc == 0x37:  # lui
            self._set(rd, w & 0xFFFFF000)
        elif opc == 0x17:  # auipc
            self._set(rd, pc + (w & 0xFFFFF000))
        elif opc == 0x6F:  # jal
            imm = ((w >> 31) << 20) | (((w >> 12) & 0xFF) << 12) | (((w >> 20) & 1) << 11) | (((w >> 21) & 0x3FF) << 1)
            self._set(rd, pc + 4)
            next_pc = (pc + _sx(imm, 21)) & M32
        elif opc == 0x67 and f3 == 0:  # jalr
            target = (rs1v + i_imm) & M32 & ~1
            self._set(rd, pc + 4)
            next_pc = target
        elif opc == 0x63:  # branches
            imm = ((w >> 31) << 12) | (((w >> 7) & 1) << 11) | (((w >> 25) & 0x3F) << 5) | (((w >> 8) & 0xF) << 1)
            taken = {
                0: rs1v == rs2v,
                1: rs1v != rs2v,
                4: _s(rs1v) < _s(rs2v),
                5: _s(rs1v) >= _s(rs2v),
                6: rs1v < rs2v,
                7: rs1v >= rs2v,
            }.get(f3)
            if taken is None:
                raise OracleInvalid(pc, w)
            if taken:
                next_pc = (pc + _sx(imm, 13)) & M32
        elif opc == 0x03:  # loads
            addr = (rs1v + i_imm) & M32
            if f3 == 0:
                self._set(rd, _sx(mem.read(addr, 1), 8) & M32)
            elif f3 == 1:
                self._set(rd, _sx(mem.read(addr, 2), 16) & M32)
            elif f3 == 2:
                self._set(rd, mem.read(addr, 4))
            elif f3 == 4:
                self._set(rd, mem.read(addr, 1))
            elif f3 == 5:
                self._set(rd, mem.read(addr, 2))
            else:
                raise OracleInvalid(pc, w)
        elif opc == 0x23:  # stores
            imm = _sx(((w >> 25) << 5) | ((w >> 7) & 0x1F), 12)
            addr = (rs1v + imm) & M32
            if f3 == 0:
                mem.write(addr, 1, rs2v & 0xFF)
            elif f3 == 1:
                mem.write(addr, 2, rs2v & 0xFFFF)
            elif f3 == 2:
                mem.write(addr, 4, rs2v)
            else:
                raise OracleInvalid(pc, w)
        elif opc == 0x13:  # alu imm
            sh = (w >> 20) & 0x1F
            f7 = w >> 25
            if f3 == 0:
                self._set(rd, rs1v + i_imm)
            elif f3 == 2:
                self._set(rd, int(_s(rs1v) < i_imm))
            elif f3 == 3:
                self._set(rd, int(rs1v < (i_imm & M32)))
            elif f3 == 4:
                self._set(rd, rs1v ^ (i_imm & M32))
            elif f3 == 6:
                self._set(rd, rs1v | (i_imm & M32))
            elif f3 == 7:
                self._set(rd, rs1v & (i_imm & M32))
            elif f3 == 1 and f7 == 0:
                self._set(rd, rs1v << sh)
            elif f3 == 5 and f7 == 0:
                self._set(rd, rs1v >> sh)
            elif f3 == 5 and f7 == 0x20:
                self._set(rd, _s(rs1v) >> sh)
            else:
                raise OracleInvalid(pc, w)
        elif opc == 0x33:  # alu reg
            f7 = w >> 25
            sh = rs2v & 0x1F
            table = {
                (0, 0x00): rs1v + rs2v,
                (0, 0x20): rs1v - rs2v,
                (1, 0x00): rs1v << sh,
                (2, 0x00): int(_s(rs1v) < _s(rs2v)),
                (3, 0x00): int(rs1v < rs2v),
                (4, 0x00): rs1v ^ rs2v,
                (5, 0x00): rs1v >> sh,
                (5, 0x20): _s(rs1v) >> sh,
                (6, 0x00): rs1v | rs2v,
                (7, 0x00): rs1v & rs2v,
            }
            if (f3, f7) not in table:
                raise OracleInvalid(pc, w)
            self._set(rd, table[(f3, f7)])
        elif opc == 0x73 and rd == 0 and f3 == 0 and (w >> 15) & 0x1F == 0 and w >> 20 in (0, 1):
            raise OracleEnv(pc, "ecall" if w >> 20 == 0 else "ebreak")
        else:
            raise OracleInvalid(pc, w)
        self.pc = next_pc
