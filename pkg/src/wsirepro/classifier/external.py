"""Client side of the external model-runner protocol.

Framing is little-endian over the runner's stdin/stdout::

    handshake  -> b"WSR1" u32 protocol_version
               <- b"WSA1" u32 num_classes
    batch      -> b"TILB" u32 n  u16 height  u16 width  u8 channels  RGB bytes
               <- b"PRBB" u32 n  f32[n * num_classes]
"""

from __future__ import annotations

import struct
import subprocess
from typing import BinaryIO, Sequence

import numpy as np

from .model import ClassifierError

PROTOCOL_VERSION = 1
NUM_CLASSES = 3
RENORMALIZE_TOLERANCE = 1e-3


class RunnerCrashed(ClassifierError):
    def __init__(self, completed: int, detail: str = ""):
        self.completed = completed
        super().__init__(f"runner exited after {completed} completed tiles" + (f": {detail}" if detail else ""))


class ProtocolViolation(ClassifierError):
    pass


class NonProbabilisticOutput(ClassifierError):
    pass


def read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks, remaining = [], n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise EOFError(f"stream closed with {remaining} of {n} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def encode_batch(pixels: np.ndarray) -> bytes:
    n, h, w, c = pixels.shape
    return b"TILB" + struct.pack("<IHHB", n, h, w, c) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def check_probabilities(probs: np.ndarray) -> np.ndarray:
    """Renormalize rows within tolerance of summing to one; reject the rest."""
    probs = np.asarray(probs, dtype=np.float64)
    sums = probs.sum(axis=1)
    bad = ~np.isfinite(probs).all(axis=1) | (probs < 0).any(axis=1) | (np.abs(sums - 1.0) > RENORMALIZE_TOLERANCE)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise NonProbabilisticOutput(f"row {row}: {probs[row].tolist()} sums to {sums[row]}")
    return probs / sums[:, None]


class ExternalRunner:
    """A model-runner subprocess speaking the tile/probability protocol."""

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        self.command = list(command)
        self.timeout = timeout
        self.process: subprocess.Popen | None = None
        self.num_classes = 0

    def start(self) -> "ExternalRunner":
        try:
            self.process = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise RunnerCrashed(0, f"cannot start {self.command[0]!r}: {exc}") from None
        try:
            self._handshake()
        except Exception:
            self.close()
            raise
        return self

    def _handshake(self) -> None:
        try:
            self.process.stdin.write(b"WSR1" + struct.pack("<I", PROTOCOL_VERSION))
            self.process.stdin.flush()
            reply = read_exact(self.process.stdout, 8)
        except (BrokenPipeError, EOFError) as exc:
            raise RunnerCrashed(0, f"during handshake: {exc}") from None
        if reply[:4] != b"WSA1":
            raise ProtocolViolation(f"bad handshake magic {reply[:4]!r}")
        (self.num_classes,) = struct.unpack("<I", reply[4:])
        if self.num_classes != NUM_CLASSES:
            raise ProtocolViolation(f"runner reports {self.num_classes} classes, expected {NUM_CLASSES}")

    def classify_batch(self, pixels: np.ndarray, completed: int = 0) -> np.ndarray:
        if self.process is None:
            raise ProtocolViolation("runner not started")
        n = pixels.shape[0]
        try:
            self.process.stdin.write(encode_batch(pixels))
            self.process.stdin.flush()
            head = read_exact(self.process.stdout, 8)
            if head[:4] != b"PRBB":
                raise ProtocolViolation(f"bad response magic {head[:4]!r}")
            (count,) = struct.unpack("<I", head[4:])
            if count != n:
                raise ProtocolViolation(f"runner answered {count} rows for a batch of {n}")
            body = read_exact(self.process.stdout, 4 * n * self.num_classes)
        except (BrokenPipeError, EOFError, ConnectionResetError) as exc:
            raise RunnerCrashed(completed, str(exc)) from None
        probs = np.frombuffer(body, dtype="<f4").reshape(n, self.num_classes)
        return check_probabilities(probs)

    def close(self) -> None:
        if self.process is None:
            return
        for stream in (self.process.stdin, self.process.stdout):
            try:
                stream.close()
            except OSError:
                pass
        try:
            self.process.wait(timeout=self.timeout)
        except subprocess.TimeoutExpired:
            self.process.kill()
            self.process.wait()
        self.process = None

    def __enter__(self) -> "ExternalRunner":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


def classify_external(runner: ExternalRunner, tiles, batch_size: int = 16) -> list[np.ndarray]:
    """Probability vectors for ``tiles`` in order, sent in batches of ``batch_size``."""
    tiles = list(tiles)
    out: list[np.ndarray] = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        pixels = np.stack([np.asarray(getattr(t, "pixels", t)) for t in chunk])
        out.extend(runner.classify_batch(pixels, completed=len(out)))
    return out
