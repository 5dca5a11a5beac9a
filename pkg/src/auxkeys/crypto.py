"""Symmetric primitives used by the key establishment protocol.

Everything is built on keyed BLAKE2s (RFC 7693) truncated to 128 bits:

* ``prf`` / ``mac``  -- truncated keyed hash of the message under the key.
* ``encrypt`` / ``decrypt`` -- a length-preserving, deterministic cipher
  (four-round Feistel network whose round functions are PRF keystreams).
* ``mask_key`` / ``unmask_key`` -- XOR of a key with a node id and a nonce.

Calls to the primitives are tallied into the counter yielded by
:func:`count_ops` while one is active.
"""

from __future__ import annotations

import contextlib
import hashlib
import hmac
from collections import Counter
from contextvars import ContextVar
from typing import Iterator

import numpy as np

KLEN = 16
TLEN = 16

_FEISTEL_ROUNDS = 4

_active_counter: ContextVar[Counter | None] = ContextVar("_active_counter", default=None)


def _tally(op: str) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter[op] += 1


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count primitive invocations made inside the ``with`` block.

    Nested blocks each see only their own calls.
    """
    counter: Counter = Counter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _check_key(key: bytes) -> None:
    if len(key) != KLEN:
        raise ValueError(f"key must be {KLEN} bytes, got {len(key)}")


def _keyed_hash(key: bytes, message: bytes) -> bytes:
    return hashlib.blake2s(message, key=key).digest()


def id_bytes(node_id: int) -> bytes:
    """Canonical KLEN-byte big-endian encoding of a node identifier."""
    if node_id < 0:
        raise ValueError("node ids are non-negative")
    return node_id.to_bytes(KLEN, "big")


def id_from_bytes(raw: bytes) -> int:
    if len(raw) != KLEN:
        raise ValueError(f"encoded id must be {KLEN} bytes")
    return int.from_bytes(raw, "big")


def prf(key: bytes, message: bytes) -> bytes:
    _check_key(key)
    _tally("prf")
    return _keyed_hash(key, message)[:KLEN]


def mac(key: bytes, message: bytes) -> bytes:
    _check_key(key)
    _tally("mac")
    return _keyed_hash(key, message)[:TLEN]


def verify(tag: bytes, key: bytes, message: bytes) -> bool:
    """Recompute the tag and compare."""
    _check_key(key)
    _tally("verify")
    return hmac.compare_digest(_keyed_hash(key, message)[:TLEN], tag)


def _keystream(key: bytes, label: bytes, length: int) -> bytes:
    if length <= 32:
        return hashlib.blake2s(label + b"\x00\x00\x00\x00", key=key).digest()[:length]
    blocks = []
    for counter in range(-(-length // 32)):
        blocks.append(_keyed_hash(key, label + counter.to_bytes(4, "big")))
    return b"".join(blocks)[:length]


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def _round_pad(key: bytes, rnd: int, half: bytes, length: int) -> int:
    label = bytes((0x45, rnd)) + len(half).to_bytes(2, "big") + half
    if length <= 32:
        pad = hashlib.blake2s(label + b"\x00\x00\x00\x00", key=key).digest()[:length]
    else:
        pad = _keystream(key, label, length)
    return int.from_bytes(pad, "big")


def _feistel(key: bytes, data: bytes, rounds: range) -> bytes:
    # unbalanced halves are fine: each round maps one half onto the other's width
    split = len(data) // 2
    left, right = data[:split], data[split:]
    n_left, n_right = len(left), len(right)
    for rnd in rounds:
        if rnd & 1:
            left = (int.from_bytes(left, "big") ^ _round_pad(key, rnd, right, n_left)).to_bytes(n_left, "big")
        else:
            right = (int.from_bytes(right, "big") ^ _round_pad(key, rnd, left, n_right)).to_bytes(n_right, "big")
    return left + right


def encrypt(key: bytes, plaintext: bytes) -> bytes:
    _check_key(key)
    _tally("encrypt")
    if len(plaintext) < 2:
        return _xor(plaintext, _keystream(key, b"E-short", len(plaintext)))
    return _feistel(key, plaintext, range(_FEISTEL_ROUNDS))


def decrypt(key: bytes, ciphertext: bytes) -> bytes:
    _check_key(key)
    _tally("decrypt")
    if len(ciphertext) < 2:
        return _xor(ciphertext, _keystream(key, b"E-short", len(ciphertext)))
    return _feistel(key, ciphertext, range(_FEISTEL_ROUNDS - 1, -1, -1))


def mask_key(key: bytes, node_id: int, nonce: bytes) -> bytes:
    _check_key(key)
    if len(nonce) != KLEN:
        raise ValueError(f"nonce must be {KLEN} bytes")
    if node_id < 0:
        raise ValueError("node ids are non-negative")
    masked = int.from_bytes(key, "big") ^ node_id ^ int.from_bytes(nonce, "big")
    return masked.to_bytes(KLEN, "big")


# XOR is an involution, so unmasking is the same operation
unmask_key = mask_key


class ByteStream:
    """Buffered byte source over a numpy Generator.

    ``Generator.bytes`` has a high per-call cost; drawing in chunks keeps the
    sequence deterministic for a given generator while making 16-byte draws
    cheap.
    """

    def __init__(self, generator: np.random.Generator, chunk: int = 4096):
        self._gen = generator
        self._chunk = chunk
        self._buf = b""
        self._pos = 0

    def bytes(self, length: int) -> bytes:
        if self._pos + length > len(self._buf):
            self._buf = self._buf[self._pos:] + self._gen.bytes(max(self._chunk, length))
            self._pos = 0
        out = self._buf[self._pos:self._pos + length]
        self._pos += length
        return out


def random_key(rng: np.random.Generator) -> bytes:
    return rng.bytes(KLEN)


def random_nonce(rng: np.random.Generator) -> bytes:
    return rng.bytes(KLEN)


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the entity named by ``path`` under ``seed``.

    The same (seed, path) always yields the same sequence; distinct paths
    give statistically independent streams.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *path])))
