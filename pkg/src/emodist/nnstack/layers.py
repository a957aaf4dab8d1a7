"""GRU cell and depthwise temporal convolution.

Two forms are provided for the GRU: `gru_cell_forward` composes one step out
of elementary `Value` ops (used for unit-level checks), while `gru_sequence`
runs a whole padded batch through a hand-written forward/backward kernel that
registers as a single graph node. Both compute the same gates:

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    c  = tanh(x Wc + (r * h) Uc + bc)      # reset applied before the matmul
    h' = (1 - z) * h + z * c

Sequence tensors are time-major, [T, B, D]: the recurrence walks axis 0 in
contiguous slabs, which is what makes the fused kernels cache-friendly.
Masked (padded) frames carry the hidden state through unchanged, so right
padding never influences the valid part of a sequence.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from emodist.nnstack.value import Value, as_value

try:
    from numba import njit as _njit
except ImportError:                      # pragma: no cover - optional speedup
    _njit = None

__all__ = [
    "GruCellParams",
    "DepthwiseTConvParams",
    "gru_cell_forward",
    "gru_sequence",
    "tconv_forward",
    "masked_mean",
]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


@dataclass
class GruCellParams:
    """Per-gate weights of one GRU layer: input-to-hidden `w_*` [D,H],
    hidden-to-hidden `u_*` [H,H], biases `b_*` [H]."""

    w_z: Value
    w_r: Value
    w_c: Value
    u_z: Value
    u_r: Value
    u_c: Value
    b_z: Value
    b_r: Value
    b_c: Value

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator):
        if input_dim < 1 or hidden < 1:
            raise ValueError("input_dim and hidden must be positive")
        w = [Value(_uniform(rng, (input_dim, hidden), input_dim), requires_grad=True)
             for _ in range(3)]
        u = [Value(_uniform(rng, (hidden, hidden), hidden), requires_grad=True)
             for _ in range(3)]
        b = [Value(np.zeros(hidden), requires_grad=True) for _ in range(3)]
        return cls(*w, *u, *b)

    @property
    def input_dim(self) -> int:
        return self.w_z.data.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_z.data.shape[1]

    def parameters(self) -> list[Value]:
        return [self.w_z, self.w_r, self.w_c,
                self.u_z, self.u_r, self.u_c,
                self.b_z, self.b_r, self.b_c]

    def named(self, prefix: str) -> dict[str, Value]:
        names = ["w_z", "w_r", "w_c", "u_z", "u_r", "u_c", "b_z", "b_r", "b_c"]
        return {f"{prefix}.{n}": v for n, v in zip(names, self.parameters())}


@dataclass
class DepthwiseTConvParams:
    """One length-3 kernel per channel [D,3] and one bias per channel [D]."""

    kernel: Value
    bias: Value

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator):
        if channels < 1:
            raise ValueError("channels must be positive")
        return cls(Value(_uniform(rng, (channels, 3), 3), requires_grad=True),
                   Value(np.zeros(channels), requires_grad=True))

    @property
    def channels(self) -> int:
        return self.kernel.data.shape[0]

    def parameters(self) -> list[Value]:
        return [self.kernel, self.bias]

    def named(self, prefix: str) -> dict[str, Value]:
        return {f"{prefix}.kernel": self.kernel, f"{prefix}.bias": self.bias}


# The polynomial part of each recurrence step is fused into single-pass
# kernels when numba is available (transcendentals stay on numpy's SIMD
# ufuncs, which beat numba's scalar libm calls without SVML). The numpy
# fallbacks below compute identical expressions.
if _njit is not None:

    @_njit(cache=True)
    def _fwd_rh(zr, h, rh):
        b, h2 = zr.shape
        hsz = h2 // 2
        for i in range(b):
            for j in range(hsz):
                rh[i, j] = zr[i, hsz + j] * h[i, j]

    @_njit(cache=True)
    def _fwd_step(c, h, zr, m, out, masked):
        b, hsz = c.shape
        for i in range(b):
            mm = m[i] if masked else 1.0
            for j in range(hsz):
                out[i, j] = h[i, j] + mm * zr[i, j] * (c[i, j] - h[i, j])

    @_njit(cache=True)
    def _bwd_candidate(dy_i, dh, rec, zr, c, m, dc, masked):
        b, hsz = c.shape
        for i in range(b):
            mm = m[i] if masked else 1.0
            for j in range(hsz):
                dtot = dy_i[i, j] + dh[i, j] + rec[i, j]
                cc = c[i, j]
                dc[i, j] = dtot * mm * zr[i, j] * (1.0 - cc * cc)

    @_njit(cache=True)
    def _bwd_gates(dy_i, dh, rec, zr, c, h_prev, drh, m, dzr, rh, masked):
        b, hsz = c.shape
        for i in range(b):
            mm = m[i] if masked else 1.0
            for j in range(hsz):
                dtot = dy_i[i, j] + dh[i, j] + rec[i, j]
                z = zr[i, j]
                r = zr[i, hsz + j]
                hp = h_prev[i, j]
                dzv = dtot * (c[i, j] - hp) * mm
                drv = drh[i, j] * hp
                dzr[i, j] = dzv * z * (1.0 - z)
                dzr[i, hsz + j] = drv * r * (1.0 - r)
                rh[i, j] = r * hp
                dh[i, j] = dtot * (1.0 - mm * z) + drh[i, j] * r

else:                                    # pragma: no cover - exercised via flag

    def _fwd_rh(zr, h, rh):
        hsz = h.shape[1]
        np.multiply(zr[:, hsz:], h, out=rh)

    def _fwd_step(c, h, zr, m, out, masked):
        hsz = h.shape[1]
        np.subtract(c, h, out=out)
        out *= zr[:, :hsz]
        if masked:
            out *= m[:, None]
        out += h

    def _bwd_candidate(dy_i, dh, rec, zr, c, m, dc, masked):
        hsz = c.shape[1]
        np.add(dy_i, dh, out=dc)
        dc += rec
        dc *= zr[:, :hsz]
        if masked:
            dc *= m[:, None]
        dc *= 1.0 - c * c

    def _bwd_gates(dy_i, dh, rec, zr, c, h_prev, drh, m, dzr, rh, masked):
        hsz = c.shape[1]
        z = zr[:, :hsz]
        r = zr[:, hsz:]
        dtot = dy_i + dh + rec
        mz = m[:, None] * z if masked else z
        dz = dtot * (c - h_prev)
        if masked:
            dz *= m[:, None]
        dzr[:, :hsz] = dz * z * (1.0 - z)
        dzr[:, hsz:] = (drh * h_prev) * r * (1.0 - r)
        np.multiply(r, h_prev, out=rh)
        np.multiply(dtot, 1.0 - mz, out=dh)
        dh += drh * r


# Reusable scratch buffers for the sequence kernels. Fresh multi-MB
# allocations cost more in page faults than the arithmetic they hold, so
# buffers are pooled per thread (graphs are thread-confined) and returned
# when a node's backward pass finishes. Inference-only graphs simply drop
# them; the pool then refills on the next training step.
_scratch = threading.local()


_POOL_KEEP = 2          # two layers' worth of buffers per role


def _acquire(role: str, shape: tuple[int, ...]) -> np.ndarray:
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    n = 1
    for s in shape:
        n *= s
    bufs = pool.setdefault(role, [])
    best = -1
    for i, buf in enumerate(bufs):
        if buf.size >= n and (best < 0 or buf.size < bufs[best].size):
            best = i
    if best >= 0:
        return bufs.pop(best)[:n].reshape(shape)
    return np.empty(n).reshape(shape)


def _release(role: str, *views: np.ndarray) -> None:
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    bufs = pool.setdefault(role, [])
    for v in views:
        base = v
        while base.base is not None:
            base = base.base
        bufs.append(base.reshape(-1))
    if len(bufs) > _POOL_KEEP:
        bufs.sort(key=lambda b: b.size)
        del bufs[:len(bufs) - _POOL_KEEP]


def gru_cell_forward(params: GruCellParams, x, h) -> Value:
    """One GRU step built from elementary ops. `x` is [D] or [B,D], `h` is
    [H] or [B,H]; returns the new hidden state with the same rank as `h`."""
    x = as_value(x)
    h = as_value(h)
    vector = x.data.ndim == 1
    if vector != (h.data.ndim == 1) or x.data.ndim > 2:
        raise ValueError("x and h must both be vectors or both be batches")
    x2 = x.reshape(1, -1) if vector else x
    h2 = h.reshape(1, -1) if vector else h
    if x2.data.shape[1] != params.input_dim or h2.data.shape[1] != params.hidden:
        raise ValueError(
            f"dimension mismatch: x has {x2.data.shape[1]}, h has "
            f"{h2.data.shape[1]}, params are "
            f"[{params.input_dim}->{params.hidden}]")

    z = (x2 @ params.w_z + h2 @ params.u_z + params.b_z).sigmoid()
    r = (x2 @ params.w_r + h2 @ params.u_r + params.b_r).sigmoid()
    c = (x2 @ params.w_c + (r * h2) @ params.u_c + params.b_c).tanh()
    out = (1.0 - z) * h2 + z * c
    return out.reshape(-1) if vector else out


def gru_sequence(params: GruCellParams, x: Value,
                 mask: np.ndarray | None = None) -> Value:
    """Run a padded batch through the GRU, starting from a zero state.

    `x` is time-major [T,B,D]; `mask` is [T,B] with 1 for valid frames
    (masked steps carry the previous hidden state through). Returns the
    hidden states [T,B,H] as one fused graph node.
    """
    x = as_value(x)
    if x.data.ndim != 3:
        raise ValueError("gru_sequence expects [T,B,D] input")
    t, b, d = x.data.shape
    hsz = params.hidden
    if params.input_dim != d:
        raise ValueError(f"input width {d} does not match params "
                         f"[{params.input_dim}->{hsz}]")
    fully_valid = mask is None or bool(mask.all())
    if mask is not None and mask.shape != (t, b):
        raise ValueError(f"mask shape {mask.shape} does not match ({t},{b})")
    masked = not fully_valid
    mt = (np.ascontiguousarray(mask, dtype=np.float64) if masked
          else np.ones((1, b)))

    wzr = np.concatenate([params.w_z.data, params.w_r.data], axis=1)
    wc = np.ascontiguousarray(params.w_c.data)
    bzr = np.concatenate([params.b_z.data, params.b_r.data])
    uzr = np.concatenate([params.u_z.data, params.u_r.data], axis=1)
    uc = np.ascontiguousarray(params.u_c.data)

    x2 = np.ascontiguousarray(x.data).reshape(t * b, d)
    projzr = _acquire("gru.projzr", (t, b, 2 * hsz))
    projc = _acquire("gru.projc", (t, b, hsz))
    np.matmul(x2, wzr, out=projzr.reshape(t * b, 2 * hsz))
    projzr += bzr
    np.matmul(x2, wc, out=projc.reshape(t * b, hsz))
    projc += params.b_c.data

    hs = np.empty((t + 1, b, hsz))      # owned by the output Value, not pooled
    hs[0] = 0.0
    zr_all = _acquire("gru.zr", (t, b, 2 * hsz))
    c_all = _acquire("gru.c", (t, b, hsz))
    rh = np.empty((b, hsz))

    for i in range(t):
        h = hs[i]
        zr = zr_all[i]
        np.matmul(h, uzr, out=zr)
        zr += projzr[i]
        np.negative(zr, out=zr)
        np.exp(zr, out=zr)
        zr += 1.0
        np.reciprocal(zr, out=zr)
        _fwd_rh(zr, h, rh)
        c = c_all[i]
        np.matmul(rh, uc, out=c)
        c += projc[i]
        np.tanh(c, out=c)
        # h' = h + m*z*(c-h): masked steps keep h unchanged
        _fwd_step(c, h, zr, mt[i if masked else 0], hs[i + 1], masked)

    out = Value(hs[1:], (x, *params.parameters()), "gru_sequence")
    released = False

    def back():
        nonlocal released
        uzr_t = np.ascontiguousarray(uzr.T)
        uc_t = np.ascontiguousarray(uc.T)
        wzr_t = np.ascontiguousarray(wzr.T)
        wc_t = np.ascontiguousarray(wc.T)
        dy = out.grad                                       # [T,B,H] contiguous
        dzr_all = _acquire("gru.dzr", (t, b, 2 * hsz))
        dc_all = _acquire("gru.dc", (t, b, hsz))
        rh_all = _acquire("gru.rh", (t, b, hsz))
        dh = np.zeros((b, hsz))
        rec = np.zeros((b, hsz))        # recurrent grad via the gate matmuls
        drh = np.empty((b, hsz))

        for i in range(t - 1, -1, -1):
            m_i = mt[i if masked else 0]
            zr = zr_all[i]
            c = c_all[i]
            _bwd_candidate(dy[i], dh, rec, zr, c, m_i, dc_all[i], masked)
            np.matmul(dc_all[i], uc_t, out=drh)
            _bwd_gates(dy[i], dh, rec, zr, c, hs[i], drh, m_i,
                       dzr_all[i], rh_all[i], masked)
            np.matmul(dzr_all[i], uzr_t, out=rec)
        # hoisted parameter/input gradients, all on contiguous 2-D slabs
        dzr2 = dzr_all.reshape(t * b, 2 * hsz)
        dc2 = dc_all.reshape(t * b, hsz)
        hprev2 = hs[:t].reshape(t * b, hsz)
        dwzr = x2.T @ dzr2
        dwc = x2.T @ dc2
        dbzr = dzr2.sum(axis=0)
        duzr = hprev2.T @ dzr2
        duc = rh_all.reshape(t * b, hsz).T @ dc2
        params.w_z.accumulate(dwzr[:, :hsz])
        params.w_r.accumulate(dwzr[:, hsz:])
        params.w_c.accumulate(dwc)
        params.b_z.accumulate(dbzr[:hsz])
        params.b_r.accumulate(dbzr[hsz:])
        params.b_c.accumulate(dc2.sum(axis=0))
        params.u_z.accumulate(duzr[:, :hsz])
        params.u_r.accumulate(duzr[:, hsz:])
        params.u_c.accumulate(duc)
        if x.requires_grad:
            dx2 = dzr2 @ wzr_t
            dx2 += dc2 @ wc_t
            x.accumulate_owned(dx2.reshape(t, b, d))
        _release("gru.dzr", dzr_all)
        _release("gru.dc", dc_all)
        _release("gru.rh", rh_all)
        if not released:
            # A second backward on this node (after a grad reset) re-reads
            # the stash, which stays intact only until another forward
            # claims these buffers; the training loop never interleaves.
            released = True
            _release("gru.projzr", projzr)
            _release("gru.projc", projc)
            _release("gru.zr", zr_all)
            _release("gru.c", c_all)

    out._backward = back
    return out


def gru_sequence_infer(params: GruCellParams, x: np.ndarray,
                       mask: np.ndarray | None = None) -> np.ndarray:
    """Graph-free forward of `gru_sequence` on plain arrays, for evaluation.
    Allocates only local buffers, so frozen params can be shared across
    threads."""
    if x.ndim != 3:
        raise ValueError("expects [T,B,D] input")
    t, b, d = x.shape
    hsz = params.hidden
    if params.input_dim != d:
        raise ValueError(f"input width {d} does not match params "
                         f"[{params.input_dim}->{hsz}]")
    fully_valid = mask is None or bool(mask.all())
    mt = None if fully_valid else np.asarray(mask, dtype=np.float64)[:, :, None]

    wx = np.concatenate([params.w_z.data, params.w_r.data, params.w_c.data], axis=1)
    bx = np.concatenate([params.b_z.data, params.b_r.data, params.b_c.data])
    uzr = np.concatenate([params.u_z.data, params.u_r.data], axis=1)
    uc = np.ascontiguousarray(params.u_c.data)

    proj = np.ascontiguousarray(x, dtype=np.float64).reshape(t * b, d) @ wx
    proj += bx
    proj = proj.reshape(t, b, 3 * hsz)
    out = np.empty((t, b, hsz))
    h = np.zeros((b, hsz))
    zr = np.empty((b, 2 * hsz))
    rh = np.empty((b, hsz))
    for i in range(t):
        np.matmul(h, uzr, out=zr)
        zr += proj[i, :, :2 * hsz]
        np.negative(zr, out=zr)
        np.exp(zr, out=zr)
        zr += 1.0
        np.reciprocal(zr, out=zr)
        z = zr[:, :hsz]
        r = zr[:, hsz:]
        np.multiply(r, h, out=rh)
        c = out[i]
        np.matmul(rh, uc, out=c)
        c += proj[i, :, 2 * hsz:]
        np.tanh(c, out=c)
        np.subtract(c, h, out=c)
        c *= z
        if not fully_valid:
            c *= mt[i]
        c += h
        h = c
    return out


def tconv_forward(params: DepthwiseTConvParams, seq) -> Value:
    """Depthwise temporal convolution, kernel size 3, stride 1, zero same
    padding. `seq` is [T,D] or time-major [T,B,D]; time is axis 0 and the
    output shape equals the input shape."""
    seq = as_value(seq)
    if seq.data.ndim not in (2, 3):
        raise ValueError("tconv expects [T,D] or [T,B,D]")
    d = seq.data.shape[-1]
    if params.channels != d:
        raise ValueError(
            f"channel mismatch: params have {params.channels}, input has {d}")
    if seq.data.shape[0] < 1:
        raise ValueError("sequence must have at least one frame")

    k = params.kernel.data
    k0, k1, k2 = k[:, 0], k[:, 1], k[:, 2]
    x = seq.data
    y = x * k1
    y[1:] += x[:-1] * k0
    y[:-1] += x[1:] * k2
    y += params.bias.data
    out = Value(y, (seq, params.kernel, params.bias), "tconv")

    def back():
        dy = out.grad
        axes = tuple(range(dy.ndim - 1))
        dk = np.empty_like(k)
        dk[:, 0] = (dy[1:] * x[:-1]).sum(axis=axes)
        dk[:, 1] = (dy * x).sum(axis=axes)
        dk[:, 2] = (dy[:-1] * x[1:]).sum(axis=axes)
        params.kernel.accumulate(dk)
        params.bias.accumulate(dy.sum(axis=axes))
        if seq.requires_grad:
            dx = dy * k1
            dx[:-1] += dy[1:] * k0
            dx[1:] += dy[:-1] * k2
            seq.accumulate_owned(dx)

    out._backward = back
    return out


def masked_mean(seq: Value, mask: np.ndarray | None = None) -> Value:
    """Mean over the time axis of [T,B,H], restricted to frames where
    `mask` [T,B] is 1. Every sequence needs at least one valid frame."""
    seq = as_value(seq)
    if seq.data.ndim != 3:
        raise ValueError("masked_mean expects [T,B,H]")
    t, b, h = seq.data.shape
    if mask is None:
        mask = np.ones((t, b))
    if mask.shape != (t, b):
        raise ValueError(f"mask shape {mask.shape} does not match ({t},{b})")
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=0)
    if (counts < 1).any():
        raise ValueError("each sequence needs at least one valid frame")
    out = Value(np.einsum("tbh,tb->bh", seq.data, m) / counts[:, None],
                (seq,), "masked_mean")

    def back():
        if seq.requires_grad:
            seq.accumulate_owned(
                np.einsum("bh,tb->tbh", out.grad / counts[:, None], m))

    out._backward = back
    return out
