"""Test double for the external runner protocol.

Answers every tile with the same probability vector.  Usage::

    python -m wsirepro.classifier.echo_runner 0.2 0.3 0.5 [--crash-after N] [--bad-magic]
"""

import argparse
import struct
import sys

from .external import read_exact


def main(argv=None) -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("probs", type=float, nargs=3)
    parser.add_argument("--crash-after", type=int, default=-1, help="exit after answering N batches")
    parser.add_argument("--bad-magic", action="store_true")
    args = parser.parse_args(argv)

    stdin, stdout = sys.stdin.buffer, sys.stdout.buffer
    hello = read_exact(stdin, 8)
    if hello[:4] != b"WSR1":
        return 2
    stdout.write((b"XXXX" if args.bad_magic else b"WSA1") + struct.pack("<I", 3))
    stdout.flush()
    answered = 0
    while True:
        try:
            head = read_exact(stdin, 13)
        except EOFError:
            return 0
        if answered == args.crash_after:
            return 3
        n, h, w, c = struct.unpack("<IHHB", head[4:])
        read_exact(stdin, n * h * w * c)
        stdout.write(b"PRBB" + struct.pack("<I", n) + struct.pack(f"<{3 * n}f", *(args.probs * n)))
        stdout.flush()
        answered += 1


if __name__ == "__main__":
    sys.exit(main())
