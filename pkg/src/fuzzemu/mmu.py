"""Byte-granular software MMU with a block TLB.

Every mapped byte carries its own permission flags, so unaligned and
odd-sized regions work without page rounding.  A TLB caches translations for
4096-byte blocks that are RAM-backed with uniform permissions; it is fully
invalidated on any map/unmap/permission change, so behaviour with the TLB on
and off is identical.
"""

from __future__ import annotations

import enum
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable

TLB_BLOCK = 4096


class Perm(enum.IntFlag):
    R = 1
    W = 2
    X = 4
    INIT = 8  # byte has been written (or came from an image)


RWX = Perm.R | Perm.W | Perm.X


def parse_perms(text: str) -> Perm:
    perms = Perm(0)
    for ch in text.lower():
        if ch == "r":
            perms |= Perm.R
        elif ch == "w":
            perms |= Perm.W
        elif ch == "x":
            perms |= Perm.X
        elif ch != "-":
            raise MmuError(f"bad permission string {text!r}")
    return perms


class FaultKind(enum.Enum):
    UNMAPPED = "unmapped"
    PERM = "perm"
    UNINIT = "uninit"


class MemFault(Exception):
    """Raised on a failed access; addr is the first offending byte."""

    def __init__(self, kind: FaultKind, addr: int, access: str, size: int = 1):
        super().__init__(f"{kind.value} on {access} of {size} byte(s) at {addr:#x}")
        self.kind = kind
        self.addr = addr
        self.access = access
        self.size = size

    def key(self) -> tuple:
        return (self.kind.value, self.access, self.addr)


class MmuError(Exception):
    pass


ReadHandler = Callable[[int, int], int]  # (offset, size) -> value
WriteHandler = Callable[[int, int, int], None]  # (offset, size, value)

# plain ints for the hot access paths; IntFlag arithmetic is surprisingly slow
_R, _W, _INIT = int(Perm.R), int(Perm.W), int(Perm.INIT)


@dataclass
class Mapping:
    start: int
    size: int
    data: bytearray | None  # None for MMIO
    perms: bytearray  # one Perm byte per mapped byte
    read_handler: ReadHandler | None = None
    write_handler: WriteHandler | None = None
    common_rwx: int | None = None  # rwx shared by every byte, None when mixed

    @property
    def end(self) -> int:
        return self.start + self.size

    @property
    def is_mmio(self) -> bool:
        return self.data is None


class Mmu:
    def __init__(self, strict_uninit: bool = False, tlb: bool = True):
        self.strict_uninit = strict_uninit
        self.tlb_enabled = tlb
        self._maps: list[Mapping] = []  # sorted by start
        self._starts: list[int] = []
        self._tlb: dict[int, tuple[Mapping, int]] = {}  # block index -> (mapping, common rwx)

    # -- mapping management ---------------------------------------------

    def map_ram(self, start: int, size: int, perms: Perm, data: bytes | None = None) -> Mapping:
        """Map RAM; bytes covered by `data` start initialized, the rest zeroed."""
        self._check_range(start, size)
        backing = bytearray(size)
        pb = bytearray([perms & ~Perm.INIT] * size)
        if data is not None:
            if len(data) > size:
                raise MmuError("image larger than mapping")
            backing[: len(data)] = data
            init = (perms & ~Perm.INIT) | Perm.INIT
            pb[: len(data)] = bytes([init]) * len(data)
        m = Mapping(start, size, backing, pb, common_rwx=int(perms) & 7)
        self._insert(m)
        return m

    def map_mmio(
        self,
        start: int,
        size: int,
        perms: Perm,
        read_handler: ReadHandler | None,
        write_handler: WriteHandler | None,
    ) -> Mapping:
        self._check_range(start, size)
        pb = bytearray([(perms & ~Perm.INIT) | Perm.INIT] * size)
        m = Mapping(start, size, None, pb, read_handler, write_handler, int(perms) & 7)
        self._insert(m)
        return m

    def unmap(self, addr: int) -> None:
        m = self._find(addr)
        if m is None:
            raise MmuError(f"nothing mapped at {addr:#x}")
        i = self._maps.index(m)
        del self._maps[i]
        del self._starts[i]
        self._tlb.clear()

    def set_perms(self, start: int, size: int, perms: Perm) -> None:
        """Change R/W/X over a byte range (may span mappings); INIT is kept."""
        addr = start
        end = start + size
        spans = []
        while addr < end:
            m = self._find(addr)
            if m is None:
                raise MemFault(FaultKind.UNMAPPED, addr, "set_perms")
            take = min(end, m.end) - addr
            spans.append((m, addr - m.start, take))
            addr += take
        for m, off, take in spans:
            base = perms & ~Perm.INIT
            for i in range(off, off + take):
                m.perms[i] = base | (m.perms[i] & Perm.INIT)
            if take == m.size:
                m.common_rwx = int(perms) & 7
            elif m.common_rwx != int(perms) & 7:
                m.common_rwx = None
        self._tlb.clear()

    def mappings(self) -> list[Mapping]:
        return list(self._maps)

    def _check_range(self, start: int, size: int) -> None:
        if size <= 0 or start < 0:
            raise MmuError("bad mapping range")
        i = bisect_right(self._starts, start)
        if i > 0 and self._maps[i - 1].end > start:
            raise MmuError(f"overlap with mapping at {self._maps[i - 1].start:#x}")
        if i < len(self._maps) and self._maps[i].start < start + size:
            raise MmuError(f"overlap with mapping at {self._maps[i].start:#x}")

    def _insert(self, m: Mapping) -> None:
        i = bisect_right(self._starts, m.start)
        self._maps.insert(i, m)
        self._starts.insert(i, m.start)
        self._tlb.clear()

    def _find(self, addr: int) -> Mapping | None:
        i = bisect_right(self._starts, addr)
        if i == 0:
            return None
        m = self._maps[i - 1]
        return m if addr < m.end else None

    # -- TLB ---------------------------------------------------------------

    def _tlb_lookup(self, addr: int, size: int) -> Mapping | None:
        """Fast translation when addr..addr+size stays inside one cached block."""
        if not self.tlb_enabled or (addr & (TLB_BLOCK - 1)) + size > TLB_BLOCK:
            return None
        hit = self._tlb.get(addr >> 12)
        return hit if hit is None else hit[0]

    def _tlb_fill(self, addr: int, m: Mapping) -> None:
        if not self.tlb_enabled or m.is_mmio:
            return
        blk = addr >> 12
        base = blk << 12
        if base < m.start or base + TLB_BLOCK > m.end:
            return
        first = m.common_rwx
        if first is None:  # mixed permissions: scan the block for uniformity
            off = base - m.start
            window = m.perms[off : off + TLB_BLOCK]
            first = window[0] & 7
            if any((p & 7) != first for p in window):
                return
        self._tlb[blk] = (m, first)

    def _tlb_perm(self, addr: int) -> int:
        hit = self._tlb.get(addr >> 12)
        return hit[1] if hit else 0

    # -- access paths -------------------------------------------------------

    def _spans(self, addr: int, size: int, need: Perm, access: str) -> list[tuple[Mapping, int, int]]:
        """Resolve an access into per-mapping spans, enforcing permissions."""
        spans = []
        cur = addr
        end = addr + size
        while cur < end:
            m = self._find(cur)
            if m is None:
                raise MemFault(FaultKind.UNMAPPED, cur, access, size)
            if m.is_mmio:
                if cur != addr:
                    # an access may not run from RAM into a peripheral
                    raise MemFault(FaultKind.PERM, cur, access, size)
                if end > m.end:
                    raise MemFault(FaultKind.UNMAPPED, m.end, access, size)
            take = min(end, m.end) - cur
            off = cur - m.start
            pb = m.perms
            for i in range(off, off + take):
                if not pb[i] & need:
                    raise MemFault(FaultKind.PERM, m.start + i, access, size)
            spans.append((m, off, take))
            cur += take
        return spans

    def read_bytes(self, addr: int, size: int) -> bytes:
        m = self._tlb_lookup(addr, size)
        if m is not None and self._tlb_perm(addr) & _R:
            off = addr - m.start
            if self.strict_uninit:
                for i in range(off, off + size):
                    if not m.perms[i] & _INIT:
                        raise MemFault(FaultKind.UNINIT, m.start + i, "read", size)
            return bytes(m.data[off : off + size])
        spans = self._spans(addr, size, Perm.R, "read")
        if spans[0][0].is_mmio:
            m, off, take = spans[0]
            if m.read_handler is None:
                raise MemFault(FaultKind.PERM, addr, "read", size)
            value = m.read_handler(off, size)
            return value.to_bytes(size, "little")
        if self.strict_uninit:
            for m, off, take in spans:
                for i in range(off, off + take):
                    if not m.perms[i] & Perm.INIT:
                        raise MemFault(FaultKind.UNINIT, m.start + i, "read", size)
        out = b"".join(bytes(m.data[off : off + take]) for m, off, take in spans)
        self._tlb_fill(addr, spans[0][0])
        return out

    def read(self, addr: int, size: int) -> int:
        return int.from_bytes(self.read_bytes(addr, size), "little")

    def write_bytes(self, addr: int, data: bytes) -> None:
        size = len(data)
        m = self._tlb_lookup(addr, size)
        if m is not None and self._tlb_perm(addr) & _W:
            off = addr - m.start
            m.data[off : off + size] = data
            pb = m.perms
            for i in range(off, off + size):
                pb[i] |= _INIT
            return
        spans = self._spans(addr, size, Perm.W, "write")
        if spans[0][0].is_mmio:
            m, off, take = spans[0]
            if m.write_handler is None:
                raise MemFault(FaultKind.PERM, addr, "write", size)
            m.write_handler(off, size, int.from_bytes(data, "little"))
            return
        pos = 0
        for m, off, take in spans:
            m.data[off : off + take] = data[pos : pos + take]
            pb = m.perms
            for i in range(off, off + take):
                pb[i] |= Perm.INIT
            pos += take
        self._tlb_fill(addr, spans[0][0])

    def write(self, addr: int, size: int, value: int) -> None:
        self.write_bytes(addr, (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little"))

    def fetch(self, addr: int, size: int) -> bytes:
        """Instruction fetch: EXEC permission required, peripherals refused."""
        spans = self._spans(addr, size, Perm.X, "fetch")
        if spans[0][0].is_mmio:
            raise MemFault(FaultKind.PERM, addr, "fetch", size)
        return b"".join(bytes(m.data[off : off + take]) for m, off, take in spans)

    def peek(self, addr: int, size: int) -> bytes | None:
        """Best-effort RAM read for instrumentation: no faults, no side effects,
        no peripheral dispatch.  Returns None if the range is not plain RAM."""
        out = bytearray()
        cur = addr
        end = addr + size
        while cur < end:
            m = self._find(cur)
            if m is None or m.is_mmio:
                return None
            take = min(end, m.end) - cur
            off = cur - m.start
            out += m.data[off : off + take]
            cur += take
        return bytes(out)

    # -- snapshotting --------------------------------------------------------

    def snapshot(self) -> list[tuple[int, bytes, bytes, int | None]]:
        return [
            (m.start, bytes(m.data) if m.data is not None else b"", bytes(m.perms), m.common_rwx)
            for m in self._maps
        ]

    def restore(self, snap: list[tuple[int, bytes, bytes, int | None]]) -> None:
        if len(snap) != len(self._maps):
            raise MmuError("snapshot does not match current mappings")
        for m, (start, data, perms, common_rwx) in zip(self._maps, snap):
            if m.start != start or len(perms) != m.size:
                raise MmuError("snapshot does not match current mappings")
            if m.data is not None:
                m.data[:] = data
            m.perms[:] = perms
            m.common_rwx = common_rwx
        self._tlb.clear()
