#!/usr/bin/env python3
"""Writes a deterministic 100-record file in CIFAR-100 binary layout (for the reader tests)."""
import random
import sys

out = sys.argv[1] if len(sys.argv) > 1 else "tests/data/cifar100_fixture.bin"
rng = random.Random(100)
with open(out, "wb") as f:
    for i in range(100):
        f.write(bytes([i % 20, (i * 37) % 100]))
        f.write(bytes(rng.randrange(256) for _ in range(3072)))
