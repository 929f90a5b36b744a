#!/usr/bin/env python3
"""Rebuild fivebugs.bin and fivebugs.json from fivebugs.s.

The built image is checked in; run this only after editing the source.
"""

import json
import os

from fuzzemu.asm import assemble

HERE = os.path.dirname(os.path.abspath(__file__))
BASE = 0x1000

EXPORTED = ("main", "compare", "compare2", "saturate", "needle")


def main():
    with open(os.path.join(HERE, "fivebugs.s")) as f:
        src = f.read()
    image, base, symbols = assemble(src, base=BASE)
    assert base == BASE
    with open(os.path.join(HERE, "fivebugs.bin"), "wb") as f:
        f.write(image)
    config = {
        "name": "fivebugs",
        "entry": hex(BASE),
        "env_base": "0xFFFF0000",
        "regions": [
            {"name": "code", "start": hex(BASE), "size": "0x1000", "perms": "rx",
             "file": "fivebugs.bin"},
            {"name": "data", "start": "0x4000", "size": "0x1000", "perms": "rw"},
        ],
        "symbols": {name: hex(symbols[name]) for name in EXPORTED},
    }
    with open(os.path.join(HERE, "fivebugs.json"), "w") as f:
        json.dump(config, f, indent=2)
        f.write("\n")
    print(f"fivebugs.bin: {len(image)} bytes, entry {hex(BASE)}")
    for name in EXPORTED:
        print(f"  {name:10} {hex(symbols[name])}")


if __name__ == "__main__":
    main()
