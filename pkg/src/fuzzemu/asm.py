"""Tiny two-pass RV32I assembler for test programs and the bundled target.

Supports the base integer instructions, a handful of pseudo-instructions
(li/la/mv/nop/j/jr/call/ret/beqz/bnez), labels, and .org/.word/.byte/.ascii
data directives.  Output is a flat binary plus a symbol table.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

M32 = 0xFFFFFFFF

_ABI = {
    "zero": 0, "ra": 1, "sp": 2, "gp": 3, "tp": 4,
    "t0": 5, "t1": 6, "t2": 7, "s0": 8, "fp": 8, "s1": 9,
    "a0": 10, "a1": 11, "a2": 12, "a3": 13, "a4": 14, "a5": 15, "a6": 16, "a7": 17,
    "s2": 18, "s3": 19, "s4": 20, "s5": 21, "s6": 22, "s7": 23, "s8": 24, "s9": 25,
    "s10": 26, "s11": 27, "t3": 28, "t4": 29, "t5": 30, "t6": 31,
}


class AsmError(Exception):
    pass


def _reg(tok: str) -> int:
    tok = tok.strip().lower()
    if tok in _ABI:
        return _ABI[tok]
    if tok.startswith("x") and tok[1:].isdigit() and 0 <= int(tok[1:]) < 32:
        return int(tok[1:])
    raise AsmError(f"bad register {tok!r}")


def _int(tok: str) -> int:
    tok = tok.strip()
    if len(tok) == 3 and tok[0] == tok[2] == "'":
        return ord(tok[1])
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"bad immediate {tok!r}") from None


def _fit(value: int, bits: int, what: str) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if not lo <= value <= hi:
        raise AsmError(f"{what} {value} does not fit in {bits} bits")
    return value & ((1 << bits) - 1)


def enc_r(opc, f3, f7, rd, rs1, rs2):
    return (f7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opc


def enc_i(opc, f3, rd, rs1, imm):
    return ((_fit(imm, 12, "imm")) << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opc


def enc_s(opc, f3, rs1, rs2, imm):
    imm = _fit(imm, 12, "store offset")
    return ((imm >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | ((imm & 0x1F) << 7) | opc


def enc_b(f3, rs1, rs2, imm):
    if imm % 2:
        raise AsmError("branch target misaligned")
    imm = _fit(imm, 13, "branch offset")
    return (
        ((imm >> 12) & 1) << 31
        | ((imm >> 5) & 0x3F) << 25
        | rs2 << 20
        | rs1 << 15
        | f3 << 12
        | ((imm >> 1) & 0xF) << 8
        | ((imm >> 11) & 1) << 7
        | 0x63
    )


def enc_u(opc, rd, imm20):
    return ((imm20 & 0xFFFFF) << 12) | (rd << 7) | opc


def enc_j(rd, imm):
    if imm % 2:
        raise AsmError("jump target misaligned")
    imm = _fit(imm, 21, "jump offset")
    return (
        ((imm >> 20) & 1) << 31
        | ((imm >> 1) & 0x3FF) << 21
        | ((imm >> 11) & 1) << 20
        | ((imm >> 12) & 0xFF) << 12
        | rd << 7
        | 0x6F
    )


_R_OPS = {
    "add": (0, 0x00), "sub": (0, 0x20), "sll": (1, 0), "slt": (2, 0), "sltu": (3, 0),
    "xor": (4, 0), "srl": (5, 0), "sra": (5, 0x20), "or": (6, 0), "and": (7, 0),
}
_I_OPS = {"addi": 0, "slti": 2, "sltiu": 3, "xori": 4, "ori": 6, "andi": 7}
_SHIFT_OPS = {"slli": (1, 0), "srli": (5, 0), "srai": (5, 0x20)}
_LOADS = {"lb": 0, "lh": 1, "lw": 2, "lbu": 4, "lhu": 5}
_STORES = {"sb": 0, "sh": 1, "sw": 2}
_BRANCHES = {"beq": 0, "bne": 1, "blt": 4, "bge": 5, "bltu": 6, "bgeu": 7}

_MEM_RE = re.compile(r"^(-?\w+|'.')\s*\(\s*(\w+)\s*\)$")


@dataclass
class _Item:
    """One output unit: fixed bytes or an instruction closure patched in pass 2."""

    addr: int
    size: int
    data: bytes | None
    emit: object = None  # callable(symbols) -> list[int] words


def _split_args(rest: str) -> list[str]:
    return [a.strip() for a in rest.split(",")] if rest.strip() else []


def assemble(source: str, base: int | None = None) -> tuple[bytes, int, dict[str, int]]:
    """Assemble `source`; returns (image, base_address, symbols)."""
    items: list[_Item] = []
    symbols: dict[str, int] = {}
    addr = None
    org = base

    def need_addr() -> int:
        nonlocal addr, org
        if addr is None:
            org = 0 if org is None else org
            addr = org
        return addr

    lines = source.splitlines()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            while True:
                m = re.match(r"^([A-Za-z_]\w*)\s*:\s*(.*)$", line)
                if not m:
                    break
                name = m.group(1)
                if name in symbols:
                    raise AsmError(f"duplicate label {name}")
                symbols[name] = need_addr()
                line = m.group(2).strip()
            if not line:
                continue
            if line.startswith("."):
                addr = _directive(line, items, need_addr, org)
                if isinstance(addr, tuple):  # .org
                    org, addr = addr
                continue
            parts = line.split(None, 1)
            mnem = parts[0].lower()
            args = _split_args(parts[1]) if len(parts) > 1 else []
            words = _instr(mnem, args, need_addr())
            items.append(_Item(need_addr(), 4 * _n_words(mnem, args), None, words))
            addr += items[-1].size
        except AsmError as e:
            raise AsmError(f"line {lineno}: {e}") from None

    out = bytearray()
    image_base = org if org is not None else 0
    for it in items:
        off = it.addr - image_base
        if off < len(out):
            raise AsmError("overlapping output")
        out += b"\0" * (off - len(out))
        if it.data is not None:
            out += it.data
        else:
            for w in it.emit(symbols, it.addr):
                out += (w & M32).to_bytes(4, "little")
    return bytes(out), image_base, symbols


def _directive(line: str, items: list[_Item], need_addr, org):
    parts = line.split(None, 1)
    name = parts[0].lower()
    rest = parts[1] if len(parts) > 1 else ""
    if name == ".org":
        v = _int(rest)
        return (v if org is None else org, v)
    addr = need_addr()
    if name == ".word":
        data = b"".join((_int(t) & M32).to_bytes(4, "little") for t in _split_args(rest))
    elif name == ".byte":
        data = bytes(_int(t) & 0xFF for t in _split_args(rest))
    elif name in (".ascii", ".asciz"):
        m = re.match(r'^"(.*)"$', rest.strip())
        if not m:
            raise AsmError("expected a quoted string")
        data = m.group(1).encode("latin-1").decode("unicode_escape").encode("latin-1")
        if name == ".asciz":
            data += b"\0"
    elif name == ".align":
        n = _int(rest)
        pad = (-addr) % n
        data = b"\0" * pad
    else:
        raise AsmError(f"unknown directive {name}")
    items.append(_Item(addr, len(data), data))
    return addr + len(data)


def _n_words(mnem: str, args: list[str]) -> int:
    if mnem == "li":
        v = _sval(_int(args[1]))
        return 1 if -2048 <= v < 2048 else 2
    if mnem == "la" or mnem == "call":
        return 2 if mnem == "la" else 1
    return 1


def _sval(v: int) -> int:
    v &= M32
    return v - (1 << 32) if v & 0x80000000 else v


def _lohi(value: int) -> tuple[int, int]:
    value &= M32
    hi = ((value + 0x800) >> 12) & 0xFFFFF
    lo = _sval(value & 0xFFF if not value & 0x800 else (value & 0xFFF) - 0x1000)
    return hi, lo


def _instr(mnem: str, args: list[str], addr: int):
    """Return a pass-2 closure (symbols, addr) -> [words]."""

    def label_or_int(tok: str, symbols) -> int:
        if re.match(r"^[A-Za-z_]\w*$", tok) and tok.lower() not in _ABI:
            if tok not in symbols:
                raise AsmError(f"unknown label {tok!r}")
            return symbols[tok]
        return _int(tok)

    def target_off(tok: str, symbols, a: int) -> int:
        """Branch/jump target: labels are absolute, bare numbers pc-relative."""
        if re.match(r"^[A-Za-z_]\w*$", tok) and tok.lower() not in _ABI:
            return label_or_int(tok, symbols) - a
        return _int(tok)

    if mnem in _R_OPS:
        f3, f7 = _R_OPS[mnem]
        rd, rs1, rs2 = map(_reg, args)
        return lambda s, a: [enc_r(0x33, f3, f7, rd, rs1, rs2)]
    if mnem in _I_OPS:
        rd, rs1 = _reg(args[0]), _reg(args[1])
        imm = _int(args[2])
        if 2048 <= imm <= 4095:  # accept raw 12-bit patterns like 0xFFF
            imm -= 4096
        return lambda s, a: [enc_i(0x13, _I_OPS[mnem], rd, rs1, imm)]
    if mnem in _SHIFT_OPS:
        f3, f7 = _SHIFT_OPS[mnem]
        rd, rs1, sh = _reg(args[0]), _reg(args[1]), _int(args[2])
        if not 0 <= sh < 32:
            raise AsmError("shift amount out of range")
        return lambda s, a: [enc_r(0x13, f3, f7, rd, rs1, sh)]
    if mnem in _LOADS:
        rd = _reg(args[0])
        m = _MEM_RE.match(args[1])
        if not m:
            raise AsmError("expected off(reg)")
        imm, rs1 = _int(m.group(1)), _reg(m.group(2))
        return lambda s, a: [enc_i(0x03, _LOADS[mnem], rd, rs1, imm)]
    if mnem in _STORES:
        rs2 = _reg(args[0])
        m = _MEM_RE.match(args[1])
        if not m:
            raise AsmError("expected off(reg)")
        imm, rs1 = _int(m.group(1)), _reg(m.group(2))
        return lambda s, a: [enc_s(0x23, _STORES[mnem], rs1, rs2, imm)]
    if mnem in _BRANCHES:
        rs1, rs2 = _reg(args[0]), _reg(args[1])
        target = args[2]
        return lambda s, a: [enc_b(_BRANCHES[mnem], rs1, rs2, target_off(target, s, a))]
    if mnem in ("beqz", "bnez"):
        rs1 = _reg(args[0])
        f3 = 0 if mnem == "beqz" else 1
        target = args[1]
        return lambda s, a: [enc_b(f3, rs1, 0, target_off(target, s, a))]
    if mnem == "lui" or mnem == "auipc":
        rd, imm = _reg(args[0]), _int(args[1])
        opc = 0x37 if mnem == "lui" else 0x17
        return lambda s, a: [enc_u(opc, rd, imm)]
    if mnem == "jal":
        if len(args) == 1:
            rd, target = 1, args[0]
        else:
            rd, target = _reg(args[0]), args[1]
        return lambda s, a: [enc_j(rd, target_off(target, s, a))]
    if mnem == "jalr":
        if len(args) == 1:
            rd, rs1, imm = 1, _reg(args[0]), 0
        else:
            rd, rs1, imm = _reg(args[0]), _reg(args[1]), _int(args[2])
        return lambda s, a: [enc_i(0x67, 0, rd, rs1, imm)]
    if mnem == "jr":
        rs1 = _reg(args[0])
        return lambda s, a: [enc_i(0x67, 0, 0, rs1, 0)]
    if mnem == "j":
        target = args[0]
        return lambda s, a: [enc_j(0, target_off(target, s, a))]
    if mnem == "call":
        target = args[0]
        return lambda s, a: [enc_j(1, target_off(target, s, a))]
    if mnem == "ret":
        return lambda s, a: [enc_i(0x67, 0, 0, 1, 0)]
    if mnem == "nop":
        return lambda s, a: [enc_i(0x13, 0, 0, 0, 0)]
    if mnem == "mv":
        rd, rs1 = _reg(args[0]), _reg(args[1])
        return lambda s, a: [enc_i(0x13, 0, rd, rs1, 0)]
    if mnem == "li":
        rd, value = _reg(args[0]), _sval(_int(args[1]))
        if -2048 <= value < 2048:
            return lambda s, a: [enc_i(0x13, 0, rd, 0, value)]
        hi, lo = _lohi(value)
        return lambda s, a: [enc_u(0x37, rd, hi), enc_i(0x13, 0, rd, rd, lo)]
    if mnem == "la":
        rd, target = _reg(args[0]), args[1]

        def emit(s, a):
            hi, lo = _lohi(label_or_int(target, s))
            return [enc_u(0x37, rd, hi), enc_i(0x13, 0, rd, rd, lo)]

        return emit
    if mnem == "ecall":
        return lambda s, a: [0x00000073]
    if mnem == "ebreak":
        return lambda s, a: [0x00100073]
    raise AsmError(f"unknown mnemonic {mnem!r}")
