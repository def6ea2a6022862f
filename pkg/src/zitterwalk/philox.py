"""Philox4x64-10 counter-based generator and the noise kernels built on it.

Every random quantity in the package is a pure function of
``(seed, path_id, step, domain)``: the key is ``(seed, KEY_SALT)`` and the
counter is ``(block, path_id, domain, 0)``.  Domains keep the driving
Rademacher noise, the initial-condition draws and the Gaussian reference
increments disjoint.

One Philox call yields 256 bits.  Rademacher step ``k`` uses bit ``k % 256``
of block ``k // 256``.  Gaussian step ``k`` feeds 32-bit half-word
``k % 8`` of block ``k // 8`` (low half first) to a 256-layer ziggurat:
8 bits pick the layer, 1 bit the sign and 23 bits the magnitude.  The rare
rejections draw from their own domains keyed on ``k`` so every step stays
addressable on its own.
"""

from __future__ import annotations

import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

M0 = np.uint64(0xD2E7470EE14C6C93)
M1 = np.uint64(0xCA5A826395121157)
W0 = np.uint64(0x9E3779B97F4A7C15)
W1 = np.uint64(0xBB67AE8584CAA73B)
KEY_SALT = np.uint64(0x5A177E2B1D0C0DE5)

DOMAIN_RADEMACHER = 0
DOMAIN_X0 = 1
DOMAIN_GAUSSIAN = 2
DOMAIN_CALIBRATION = 3
DOMAIN_GAUSSIAN_TAIL = 4
DOMAIN_GAUSSIAN_INNER = 5

_ONE = np.uint64(1)
_U8 = np.uint64(8)
_U255 = np.uint64(255)
_S11 = np.uint64(11)
_S32 = np.uint64(32)
ZIG_BITS = 23
_MASK_MAG = np.uint64((1 << ZIG_BITS) - 1)
_MASK32 = np.uint64(0xFFFFFFFF)
_INV_2_53 = 1.0 / 9007199254740992.0


def as_u64(value: int) -> np.uint64:
    """Map any Python integer (negative included) onto the uint64 ring."""
    return np.uint64(int(value) & 0xFFFFFFFFFFFFFFFF)


@intrinsic
def _mulhilo(typingctx, a, b):
    """Full 64x64 -> 128-bit product as (hi, lo), via a native i128 multiply."""
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        hi = builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))
        lo = builder.trunc(prod, ir.IntType(64))
        return context.make_tuple(builder, signature.return_type, (hi, lo))

    return sig, codegen


@nb.njit(inline="always")
def _round(c0, c1, c2, c3, k0, k1):
    hi0, lo0 = _mulhilo(M0, c0)
    hi1, lo1 = _mulhilo(M1, c2)
    return hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0


@nb.njit(cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    c0, c1, c2, c3 = _round(c0, c1, c2, c3, k0, k1)
    for _ in range(9):
        k0 = k0 + W0
        k1 = k1 + W1
        c0, c1, c2, c3 = _round(c0, c1, c2, c3, k0, k1)
    return c0, c1, c2, c3


@nb.njit(inline="always")
def _philox_pair(a0, b0, c1, c2, k0, k1):
    """Two Philox4x64-10 blocks with counters (a0, c1, c2, 0) and (b0, c1, c2, 0).

    The rounds are interleaved so the two multiply chains overlap.
    """
    z = np.uint64(0)
    a1, a2, a3 = c1, c2, z
    b1, b2, b3 = c1, c2, z
    a0, a1, a2, a3 = _round(a0, a1, a2, a3, k0, k1)
    b0, b1, b2, b3 = _round(b0, b1, b2, b3, k0, k1)
    for _ in range(9):
        k0 = k0 + W0
        k1 = k1 + W1
        a0, a1, a2, a3 = _round(a0, a1, a2, a3, k0, k1)
        b0, b1, b2, b3 = _round(b0, b1, b2, b3, k0, k1)
    return a0, a1, a2, a3, b0, b1, b2, b3


@nb.njit(cache=True)
def _block(seed, path_id, block, domain):
    return philox4x64(block, path_id, domain, np.uint64(0), seed, KEY_SALT)


@nb.njit(inline="always")
def _unit(w):
    # [0, 1)
    return np.float64(w >> _S11) * _INV_2_53


@nb.njit(inline="always")
def _unit_open(w):
    # (0, 1)
    return (np.float64(w >> _S11) + 0.5) * _INV_2_53


@nb.njit(cache=True)
def rademacher_row(seed, pid, k0, row):
    """row[j] = eps(seed, pid, k0 + j) as +-1.0."""
    T = row.shape[0]
    dom = np.uint64(DOMAIN_RADEMACHER)
    j = 0
    while j < T:
        k = k0 + j
        w = _block(seed, pid, np.uint64(k >> 8), dom)
        b = k & 255
        stop = min(T, j + 256 - b)
        while j < stop:
            word = w[b >> 6]
            row[j] = np.float64((word >> np.uint64(b & 63)) & _ONE) * 2.0 - 1.0
            j += 1
            b += 1


def _ziggurat_tables():
    # 256-layer Marsaglia-Tsang tables scaled for a 23-bit magnitude draw
    m1 = 2.0**ZIG_BITS
    dn = ZIG_R
    tn = dn
    vn = 0.00492867323399
    ki = np.zeros(256, dtype=np.uint64)
    wi = np.zeros(256)
    fi = np.zeros(256)
    q = vn / np.exp(-0.5 * dn * dn)
    ki[0] = np.uint64((dn / q) * m1)
    wi[0] = q / m1
    wi[255] = dn / m1
    fi[0] = 1.0
    fi[255] = np.exp(-0.5 * dn * dn)
    for i in range(254, 0, -1):
        dn = np.sqrt(-2.0 * np.log(vn / dn + np.exp(-0.5 * dn * dn)))
        ki[i + 1] = np.uint64((dn / tn) * m1)
        tn = dn
        fi[i] = np.exp(-0.5 * dn * dn)
        wi[i] = dn / m1
    return ki, wi, fi


ZIG_R = 3.6541528853610088
_ZIG_INV_R = 1.0 / ZIG_R
ZIG_KI, ZIG_WI, ZIG_FI = _ziggurat_tables()


@nb.njit
def _ziggurat_slow(seed, pid, k, first):
    """Standard normal for step k once the fast path of the 32-bit draw ``first`` failed.

    Attempt ``a`` reads tail block (k, pid, TAIL, a): the low half of its
    word 0 is the fresh 32-bit draw for a > 0 (attempt 0 reuses ``first``),
    words 1-2 are the uniforms for the wedge / base-strip tests.
    """
    dom_tail = np.uint64(DOMAIN_GAUSSIAN_TAIL)
    dom_inner = np.uint64(DOMAIN_GAUSSIAN_INNER)
    a = np.uint64(0)
    r = first
    while True:
        t0, t1, t2, _ = philox4x64(k, pid, dom_tail, a, seed, KEY_SALT)
        if a > 0:
            r = t0 & _MASK32
        idx = r & _U255
        rr = r >> _U8
        rabs = (rr >> _ONE) & _MASK_MAG
        negative = (rr & _ONE) == _ONE
        x = np.float64(rabs) * ZIG_WI[idx]
        if negative:
            x = -x
        if a > 0 and rabs < ZIG_KI[idx]:
            return x
        if idx == 0:
            u1 = _unit(t1)
            u2 = _unit(t2)
            m = np.uint64(0)
            while True:
                xx = -_ZIG_INV_R * np.log1p(-u1)
                yy = -np.log1p(-u2)
                if yy + yy > xx * xx:
                    return -(ZIG_R + xx) if negative else ZIG_R + xx
                m += _ONE
                i0, i1, _, _ = philox4x64(k, pid, dom_inner, (a << _S32) | m, seed, KEY_SALT)
                u1 = _unit(i0)
                u2 = _unit(i1)
        elif (ZIG_FI[idx - 1] - ZIG_FI[idx]) * _unit(t1) + ZIG_FI[idx] < np.exp(-0.5 * x * x):
            return x
        a += _ONE


@nb.njit(inline="always")
def _ziggurat(seed, pid, k, h):
    idx = h & _U255
    rr = h >> _U8
    rabs = (rr >> _ONE) & _MASK_MAG
    if rabs < ZIG_KI[idx]:
        # branch-free sign: the sign bit is a fair coin, so a branch on it mispredicts
        sign = 1.0 - 2.0 * np.float64(rr & _ONE)
        return sign * (np.float64(rabs) * ZIG_WI[idx])
    return _ziggurat_slow(seed, pid, k, h)


@nb.njit(cache=True, inline="always")
def gaussian_row(seed, pid, k0, row, domain):
    """row[j] = standard normal draw for (seed, pid, k0 + j)."""
    T = row.shape[0]
    dom = np.uint64(domain)
    j = 0
    while j < T:
        k = k0 + j
        kb = np.uint64(k >> 3)
        words = _philox_pair(kb, kb + _ONE, pid, dom, seed, KEY_SALT)
        q = k & 7
        stop = min(T, j + 16 - q)
        while j < stop:
            h = (words[q >> 1] >> np.uint64(32 * (q & 1))) & _MASK32
            row[j] = _ziggurat(seed, pid, np.uint64(k0 + j), h)
            j += 1
            q += 1


@nb.njit(cache=True)
def _fill_rademacher(seed, path_ids, k0, out):
    T, n = out.shape
    row = np.empty(T)
    for i in range(n):
        rademacher_row(seed, path_ids[i], k0, row)
        out[:, i] = row


@nb.njit(cache=True)
def _fill_gaussian(seed, path_ids, k0, out, domain):
    T, n = out.shape
    row = np.empty(T)
    for i in range(n):
        gaussian_row(seed, path_ids[i], k0, row, domain)
        out[:, i] = row


@nb.njit(cache=True)
def _x0_words(seed, path_ids, out):
    dom = np.uint64(DOMAIN_X0)
    for i in range(path_ids.shape[0]):
        w = _block(seed, path_ids[i], np.uint64(0), dom)
        for c in range(4):
            out[i, c] = _unit_open(w[c])


def philox_block(seed: int, path_id: int, block: int, domain: int) -> tuple[int, int, int, int]:
    words = _block(as_u64(seed), as_u64(path_id), as_u64(block), as_u64(domain))
    return tuple(int(w) for w in words)


def as_ids(path_ids) -> np.ndarray:
    ids = np.asarray(path_ids)
    if ids.dtype == np.uint64:
        return np.ascontiguousarray(ids)
    if ids.dtype.kind == "i":
        # two's complement reinterpretation is the mod 2^64 map
        return np.ascontiguousarray(ids.astype(np.int64).view(np.uint64))
    return np.array([int(p) & 0xFFFFFFFFFFFFFFFF for p in np.ravel(ids)], dtype=np.uint64)


def rademacher_matrix(seed: int, path_ids, k0: int, n_steps: int) -> np.ndarray:
    """Time-major (n_steps, n_paths) array of +-1.0 draws."""
    ids = as_ids(path_ids)
    out = np.empty((n_steps, ids.shape[0]), dtype=np.float64)
    if n_steps:
        _fill_rademacher(as_u64(seed), ids, int(k0), out)
    return out


def gaussian_matrix(seed: int, path_ids, k0: int, n_steps: int, domain: int = DOMAIN_GAUSSIAN) -> np.ndarray:
    """Time-major (n_steps, n_paths) array of standard normal draws."""
    ids = as_ids(path_ids)
    out = np.empty((n_steps, ids.shape[0]), dtype=np.float64)
    if n_steps:
        _fill_gaussian(as_u64(seed), ids, int(k0), out, int(domain))
    return out


def x0_uniforms(seed: int, path_ids) -> np.ndarray:
    """(n_paths, 4) uniforms in (0, 1) from the initial-condition domain."""
    ids = as_ids(path_ids)
    out = np.empty((ids.shape[0], 4), dtype=np.float64)
    _x0_words(as_u64(seed), ids, out)
    return out
