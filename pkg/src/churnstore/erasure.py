"""Information-dispersal coding: split a payload into L pieces so that any K
of them reconstruct it exactly.

Each chunk of K payload bytes is treated as the coefficients of a
degree-(K-1) polynomial over GF(256); piece i stores the evaluations at
x = i+1. Any K pieces give K evaluations of each chunk polynomial, which a
Vandermonde solve inverts back to the coefficients.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import HashMismatch, InvalidParams, NotEnoughPieces

# GF(2^8) with the AES reduction polynomial x^8+x^4+x^3+x+1; generator 3.
_EXP = np.zeros(512, dtype=np.uint8)
_LOG = np.zeros(256, dtype=np.int32)


def _build_tables():
    x = 1
    for i in range(255):
        _EXP[i] = x
        _LOG[x] = i
        x ^= (x << 1) ^ (0x11B if x & 0x80 else 0)
        x &= 0xFF
    _EXP[255:510] = _EXP[0:255]


_build_tables()


def _gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(_EXP[_LOG[a] + _LOG[b]])


def _gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("GF(256) inverse of 0")
    return int(_EXP[255 - _LOG[a]])


def _gf_mul_vec_scalar(vec: np.ndarray, s: int) -> np.ndarray:
    """Multiply a uint8 vector by a scalar in GF(256)."""
    if s == 0:
        return np.zeros_like(vec)
    out = _EXP[_LOG[vec] + _LOG[s]]
    out = out.copy()
    out[vec == 0] = 0
    return out


def _gf_matvec(mat, vecs: np.ndarray) -> np.ndarray:
    """(K x K) GF matrix times (K x n_chunks) GF columns."""
    K = len(mat)
    out = np.zeros_like(vecs)
    for i in range(K):
        acc = np.zeros(vecs.shape[1], dtype=np.uint8)
        for j in range(K):
            acc ^= _gf_mul_vec_scalar(vecs[j], mat[i][j])
        out[i] = acc
    return out


def _gf_matinv(mat) -> list:
    """Invert a KxK matrix over GF(256) by Gaussian elimination."""
    K = len(mat)
    a = [row[:] for row in mat]
    inv = [[1 if i == j else 0 for j in range(K)] for i in range(K)]
    for col in range(K):
        piv = next((r for r in range(col, K) if a[r][col] != 0), None)
        if piv is None:
            raise InvalidParams("singular interpolation matrix")
        a[col], a[piv] = a[piv], a[col]
        inv[col], inv[piv] = inv[piv], inv[col]
        s = _gf_inv(a[col][col])
        a[col] = [_gf_mul(v, s) for v in a[col]]
        inv[col] = [_gf_mul(v, s) for v in inv[col]]
        for r in range(K):
            if r != col and a[r][col] != 0:
                f = a[r][col]
                a[r] = [v ^ _gf_mul(f, w) for v, w in zip(a[r], a[col])]
                inv[r] = [v ^ _gf_mul(f, w) for v, w in zip(inv[r], inv[col])]
    return inv


HEADER_LEN = 32 + 2 + 2 + 2 + 8
_HEADER_FMT = ">32sHHHQ"


@dataclass(frozen=True)
class CodeParams:
    """Dispersal parameters: L total pieces, any K reconstruct."""

    L: int
    K: int

    def __post_init__(self):
        if not (1 <= self.K < self.L):
            raise InvalidParams(f"need 1 <= K < L, got K={self.K}, L={self.L}")
        if self.L > 255:
            raise InvalidParams(f"L must be at most 255, got {self.L}")

    @classmethod
    def for_committee(cls, h: int, n: int) -> "CodeParams":
        """Paper coupling: L = h*ceil(ln n) pieces, K = (h-2)*ceil(ln n)."""
        import math
        if h < 3:
            raise InvalidParams("erasure mode needs h >= 3 so that K >= ceil(ln n)")
        lnc = math.ceil(math.log(n))
        return cls(L=h * lnc, K=(h - 2) * lnc)

    def piece_size(self, payload_len: int) -> int:
        return -(-payload_len // self.K)


@dataclass(frozen=True)
class Piece:
    item_id: bytes
    index: int
    data: bytes
    params: CodeParams
    payload_len: int

    def to_wire(self) -> bytes:
        head = struct.pack(_HEADER_FMT, self.item_id, self.index,
                           self.params.L, self.params.K, self.payload_len)
        return head + self.data

    @classmethod
    def from_wire(cls, blob: bytes) -> "Piece":
        item_id, index, L, K, plen = struct.unpack(_HEADER_FMT, blob[:HEADER_LEN])
        return cls(item_id=item_id, index=index, data=blob[HEADER_LEN:],
                   params=CodeParams(L=L, K=K), payload_len=plen)


def item_hash(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


def disperse(payload: bytes, params: CodeParams) -> list:
    """Encode payload into L pieces, any K of which reconstruct it."""
    if not payload:
        raise InvalidParams("payload must be non-empty")
    K, L = params.K, params.L
    hid = item_hash(payload)
    size = params.piece_size(len(payload))
    buf = np.frombuffer(payload.ljust(size * K, b"\0"), dtype=np.uint8)
    coeffs = buf.reshape(size, K).T.copy()       # (K, n_chunks)
    pieces = []
    for i in range(L):
        x = i + 1
        val = coeffs[K - 1].copy()
        for j in range(K - 2, -1, -1):           # Horner at x
            val = _gf_mul_vec_scalar(val, x) ^ coeffs[j]
        pieces.append(Piece(item_id=hid, index=i, data=val.tobytes(),
                            params=params, payload_len=len(payload)))
    return pieces


def reconstruct(pieces) -> bytes:
    """Recover the exact payload from any K distinct pieces; verifies the
    result against the item hash."""
    pieces = list(pieces)
    if not pieces:
        raise NotEnoughPieces("no pieces supplied")
    params = pieces[0].params
    hid = pieces[0].item_id
    plen = pieces[0].payload_len
    for p in pieces:
        if p.params != params or p.item_id != hid or p.payload_len != plen:
            raise InvalidParams("mixed pieces from different items or encodings")
    by_index = {}
    for p in pieces:
        by_index.setdefault(p.index, p)
    if len(by_index) < params.K:
        raise NotEnoughPieces(
            f"need {params.K} distinct pieces, got {len(by_index)}")
    chosen = sorted(by_index.values(), key=lambda p: p.index)[:params.K]
    K = params.K
    xs = [p.index + 1 for p in chosen]
    vand = [[_EXP[(_LOG[x] * j) % 255] if x != 0 else (1 if j == 0 else 0)
             for j in range(K)] for x in xs]
    vand = [[int(v) for v in row] for row in vand]
    vinv = _gf_matinv(vand)
    vals = np.stack([np.frombuffer(p.data, dtype=np.uint8) for p in chosen])
    coeffs = _gf_matvec(vinv, vals)              # (K, n_chunks)
    payload = coeffs.T.reshape(-1).tobytes()[:plen]
    if item_hash(payload) != hid:
        raise HashMismatch("reconstructed payload fails item-id hash check")
    return payload
