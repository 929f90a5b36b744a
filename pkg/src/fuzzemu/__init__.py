"""Fuzzing-first CPU emulation: RV32I guests lifted to a P-code IR, executed
through a block cache with plugin-injected instrumentation, plus a greybox
fuzzing frontend."""

__version__ = "0.1.0"
