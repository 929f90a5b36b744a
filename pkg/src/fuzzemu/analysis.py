"""Comparison-site extraction from lifted blocks.

One block's ops are read as Datalog-style facts over SSA-versioned varnodes
(each definition gets a fresh version, so register and temp reuse cannot merge
unrelated values).  COPY and INT_ZEXT contribute copy facts, BOOL_NEGATE a
parity-flipping copy fact, and the copy relation is closed under transitivity
by fixpoint.  A comparison becomes a site when its result reaches the
condition of a guest-target CBRANCH through that relation.

Two idioms are promoted back to their real operands before the join:

* ``t = INT_SUB a, b`` later tested against literal zero reads as ``a ? b``.
* a comparison result tested against literal zero reads as the inner
  comparison itself, flipped when the test is ``== 0``.

Synthetic (instrumentation-injected) ops and intra-block skip CBRANCHes
produce no facts, so an instrumented block yields the same sites as a clean
one.  Sampling contract: both operands of a site hold their compared values
immediately *before* ``ops[op_index]`` executes; instrumentation that wants
the runtime values must inject there, not at the branch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .pcode import (
    CMP_OPS,
    AddressSpace,
    OpCode,
    PcodeBlock,
    VarNode,
    mask,
    to_signed,
)


class CmpOperator(enum.Enum):
    EQ = "=="
    NE = "!="
    ULT = "<u"
    UGE = ">=u"
    SLT = "<s"
    SGE = ">=s"


FLIP = {
    CmpOperator.EQ: CmpOperator.NE,
    CmpOperator.NE: CmpOperator.EQ,
    CmpOperator.ULT: CmpOperator.UGE,
    CmpOperator.UGE: CmpOperator.ULT,
    CmpOperator.SLT: CmpOperator.SGE,
    CmpOperator.SGE: CmpOperator.SLT,
}

_BASE_OPERATOR = {
    OpCode.INT_EQUAL: CmpOperator.EQ,
    OpCode.INT_NOTEQUAL: CmpOperator.NE,
    OpCode.INT_LESS: CmpOperator.ULT,
    OpCode.INT_SLESS: CmpOperator.SLT,
}

# Sites usable for sub-byte equality feedback; ordered compares only make
# sense for operand logging.
EQUALITY_OPERATORS = frozenset({CmpOperator.EQ, CmpOperator.NE})

_COPY_LIKE = (OpCode.COPY, OpCode.INT_ZEXT)


def holds(operator: CmpOperator, lhs: int, rhs: int, width: int) -> bool:
    """Truth of `lhs operator rhs` at the given operand width in bytes."""
    a, b = lhs & mask(width), rhs & mask(width)
    if operator is CmpOperator.EQ:
        return a == b
    if operator is CmpOperator.NE:
        return a != b
    if operator is CmpOperator.ULT:
        return a < b
    if operator is CmpOperator.UGE:
        return a >= b
    sa, sb = to_signed(a, width), to_signed(b, width)
    return sa < sb if operator is CmpOperator.SLT else sa >= sb


@dataclass(frozen=True)
class ComparisonSite:
    """One comparison that steers a guest conditional branch.

    op_index is where the operands are live (the comparing or subtracting op),
    branch_index the CBRANCH the result reaches.  operator gives the sense
    actually taken at the branch, BOOL_NEGATE chains folded in.
    """

    op_index: int
    branch_index: int
    operator: CmpOperator
    lhs: VarNode
    rhs: VarNode
    width: int


def _extract(block: PcodeBlock):
    """Base facts: copy edges (with negate parity), comparisons, branches."""
    vers: dict[tuple, int] = {}

    def read(vn: VarNode):
        if vn.space in (AddressSpace.REGISTER, AddressSpace.TEMP):
            return (vn.space, vn.id, vers.get((vn.space, vn.id), 0))
        return None  # constants and addresses carry no dataflow here

    copies: list[tuple] = []  # (dst_ssa, src_ssa, negate_parity)
    cmps: dict[tuple, tuple] = {}  # result_ssa -> (op_index, operator, lhs, rhs, width)
    defs: dict[tuple, tuple] = {}  # ssa -> (opcode, op_index, raw_inputs, src_ssas)
    branches: list[tuple] = []  # (cond_ssa, op_index)

    for idx, o in enumerate(block.ops):
        if o.opcode is OpCode.CBRANCH and not o.synthetic:
            # Constant targets are intra-block skips, not guest control flow.
            if o.inputs[0].space is AddressSpace.RAM:
                c = read(o.inputs[1])
                if c is not None:
                    branches.append((c, idx))
        if o.output is None:
            continue
        srcs = tuple(read(vn) for vn in o.inputs)
        k = (o.output.space, o.output.id)
        vers[k] = vers.get(k, 0) + 1  # versions advance even for synthetic defs
        out = (o.output.space, o.output.id, vers[k])
        if o.synthetic:
            continue
        defs[out] = (o.opcode, idx, o.inputs, srcs)
        if o.opcode in _COPY_LIKE and srcs[0] is not None:
            copies.append((out, srcs[0], 0))
        elif o.opcode is OpCode.BOOL_NEGATE and srcs[0] is not None:
            copies.append((out, srcs[0], 1))
        elif o.opcode in CMP_OPS:
            operator = _BASE_OPERATOR[o.opcode]
            rhs = o.inputs[1]
            site = (idx, operator, o.inputs[0], rhs, o.inputs[0].size)
            if operator in EQUALITY_OPERATORS and rhs.space is AddressSpace.CONSTANT and rhs.id == 0:
                promoted = _promote(srcs[0], operator, cmps, defs)
                if promoted is not None:
                    site = promoted
            cmps[out] = site
    return copies, cmps, branches


def _promote(src, outer: CmpOperator, cmps: dict, defs: dict):
    """Resolve a value tested against zero back to a subtract or comparison.

    Chases copies; passing through BOOL_NEGATE flips the outer sense, and
    reaching an inner comparison flips once more for ``== 0``.
    """
    seen = set()
    while src is not None and src not in seen:
        seen.add(src)
        if src in cmps:  # inner comparisons are already promoted themselves
            idx, op0, lhs, rhs, width = cmps[src]
            flipped = FLIP[op0] if outer is CmpOperator.EQ else op0
            return (idx, flipped, lhs, rhs, width)
        d = defs.get(src)
        if d is None:
            return None
        opcode, idx, raw, srcs = d
        if opcode in _COPY_LIKE:
            src = srcs[0]
        elif opcode is OpCode.BOOL_NEGATE:
            outer = FLIP[outer]
            src = srcs[0]
        elif opcode is OpCode.INT_SUB:
            return (idx, outer, raw[0], raw[1], raw[0].size)
        else:
            return None
    return None


def _solve_semi_naive(copies, seeds):
    """Transitive closure of the copy relation, joining only fresh facts."""
    by_src: dict = {}
    for dst, src, parity in copies:
        by_src.setdefault(src, []).append((dst, parity))
    known: dict = {c: {(c, 0)} for c in seeds}
    delta = {c: {(c, 0)} for c in seeds}
    while delta:
        new: dict = {}
        for src, facts in delta.items():
            for dst, flip in by_src.get(src, ()):
                have = known.get(dst, ())
                for c, p in facts:
                    f = (c, p ^ flip)
                    if f not in have and f not in new.get(dst, ()):
                        new.setdefault(dst, set()).add(f)
        for dst, facts in new.items():
            known.setdefault(dst, set()).update(facts)
        delta = new
    return known


def _solve_naive(copies, seeds):
    """Same closure, re-joining the full database every round."""
    known: dict = {c: {(c, 0)} for c in seeds}
    grew = True
    while grew:
        grew = False
        for dst, src, flip in copies:
            for c, p in tuple(known.get(src, ())):
                f = (c, p ^ flip)
                tgt = known.setdefault(dst, set())
                if f not in tgt:
                    tgt.add(f)
                    grew = True
    return known


def find_comparison_sites(block: PcodeBlock, *, naive: bool = False) -> list[ComparisonSite]:
    """All comparisons whose result steers a guest CBRANCH in `block`.

    `naive` switches the closure to full re-evaluation; results are identical,
    it exists as an oracle for the default semi-naive solver.
    """
    copies, cmps, branches = _extract(block)
    if not branches or not cmps:
        return []
    solve = _solve_naive if naive else _solve_semi_naive
    paths = solve(copies, cmps.keys())
    out = set()
    for cond_ssa, bidx in branches:
        for c, parity in paths.get(cond_ssa, ()):
            idx, operator, lhs, rhs, width = cmps[c]
            if parity:
                operator = FLIP[operator]
            out.add(ComparisonSite(idx, bidx, operator, lhs, rhs, width))
    return sorted(out, key=lambda s: (s.op_index, s.branch_index, s.operator.value))
