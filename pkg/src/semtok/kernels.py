"""Hot numeric kernels used by the autodiff ops.

Every kernel exists twice: a numba ``@njit`` version and a plain numpy
version with identical semantics. The module-level names (``layernorm_fwd``
and friends) point at the numba versions unless numba is missing or
``SEMTOK_NUMBA=0`` is set; GELU always uses numpy, which is faster. Both families are importable directly so the
benchmark and the tests can compare them.
"""
import math

import numpy as np

from ._jit import USE_NUMBA, njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


# ---------------------------------------------------------------- numpy

def np_layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def np_layernorm_bwd(g, xhat, rstd, gain):
    dxhat = g * gain
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


def np_softmax_fwd(x, mask):
    # mask: 2-D boolean, True = participates
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_K * x * x * x)))


def np_gelu_bwd(g, x):
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def _split_heads(a, heads):
    m, d = a.shape
    return a.reshape(m, heads, d // heads).transpose(1, 0, 2)


def np_attention_fwd(q, k, v, heads, keymask):
    """Multi-head scaled dot-product attention.

    ``keymask`` is a 1-D boolean array over key rows (True = visible).
    Returns the merged output and the per-head probabilities.
    """
    m, d = q.shape
    dh = d // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    s = np.where(keymask[None, None, :], s, -np.inf)
    s = s - s.max(axis=2, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=2, keepdims=True)
    o = np.matmul(p, vh)
    return o.transpose(1, 0, 2).reshape(m, d), p


def np_attention_bwd(g, q, k, v, p, heads):
    m, d = q.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qh, kh, vh, gh = (_split_heads(a, heads) for a in (q, k, v, g))
    dv = np.matmul(p.transpose(0, 2, 1), gh)
    dp = np.matmul(gh, vh.transpose(0, 2, 1))
    ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) * scale
    dq = np.matmul(ds, kh)
    dk = np.matmul(ds.transpose(0, 2, 1), qh)

    def merge(a):
        return a.transpose(1, 0, 2).reshape(m, d)

    return merge(dq), merge(dk), merge(dv)


# ---------------------------------------------------------------- numba

@njit(cache=True, nogil=True)
def nb_layernorm_fwd(x, gain, bias, eps):
    m, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(m)
    for i in range(m):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


@njit(cache=True, nogil=True)
def nb_layernorm_bwd(g, xhat, rstd, gain):
    m, d = g.shape
    dx = np.empty_like(g)
    dgain = np.zeros(d)
    dbias = np.zeros(d)
    for i in range(m):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dxh = g[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = (g[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx, dgain, dbias


@njit(cache=True, nogil=True)
def nb_softmax_fwd(x, mask):
    m, n = x.shape
    y = np.zeros_like(x)
    for i in range(m):
        mx = -np.inf
        for j in range(n):
            if mask[i, j] and x[i, j] > mx:
                mx = x[i, j]
        tot = 0.0
        for j in range(n):
            if mask[i, j]:
                e = math.exp(x[i, j] - mx)
                y[i, j] = e
                tot += e
        for j in range(n):
            y[i, j] /= tot
    return y


@njit(cache=True, nogil=True)
def nb_softmax_bwd(g, y):
    m, n = g.shape
    dx = np.empty_like(g)
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return dx


@njit(cache=True, nogil=True)
def nb_gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        a = flat[i]
        out[i] = 0.5 * a * (1.0 + math.tanh(GELU_C * (a + GELU_K * a * a * a)))
    return out.reshape(x.shape)


@njit(cache=True, nogil=True)
def nb_gelu_bwd(g, x):
    gf = g.ravel()
    xf = x.ravel()
    out = np.empty_like(xf)
    for i in range(xf.size):
        a = xf[i]
        t = math.tanh(GELU_C * (a + GELU_K * a * a * a))
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * a * a)
        out[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * a * dt)
    return out.reshape(x.shape)


@njit(cache=True, nogil=True)
def nb_attention_fwd(q, k, v, heads, keymask):
    m, d = q.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    out = np.empty((m, d))
    p = np.zeros((heads, m, m))
    for h in range(heads):
        c0 = h * dh
        qh = np.ascontiguousarray(q[:, c0:c0 + dh])
        kh = np.ascontiguousarray(k[:, c0:c0 + dh])
        vh = np.ascontiguousarray(v[:, c0:c0 + dh])
        s = np.dot(qh, kh.T)
        ph = p[h]
        for i in range(m):
            mx = -np.inf
            for j in range(m):
                if keymask[j] and s[i, j] > mx:
                    mx = s[i, j]
            tot = 0.0
            for j in range(m):
                if keymask[j]:
                    e = math.exp((s[i, j] - mx) * scale)
                    ph[i, j] = e
                    tot += e
            inv = 1.0 / tot
            for j in range(m):
                ph[i, j] *= inv
        out[:, c0:c0 + dh] = np.dot(ph, vh)
    return out, p


@njit(cache=True, nogil=True)
def nb_attention_bwd(g, q, k, v, p, heads):
    m, d = q.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    dq = np.empty((m, d))
    dk = np.empty((m, d))
    dv = np.empty((m, d))
    for h in range(heads):
        c0 = h * dh
        qh = np.ascontiguousarray(q[:, c0:c0 + dh])
        kh = np.ascontiguousarray(k[:, c0:c0 + dh])
        vh = np.ascontiguousarray(v[:, c0:c0 + dh])
        gh = np.ascontiguousarray(g[:, c0:c0 + dh])
        ph = np.ascontiguousarray(p[h])
        dv[:, c0:c0 + dh] = np.dot(ph.T, gh)
        dp = np.dot(gh, vh.T)
        ds = np.empty((m, m))
        for i in range(m):
            dot = 0.0
            for j in range(m):
                dot += dp[i, j] * ph[i, j]
            for j in range(m):
                ds[i, j] = ph[i, j] * (dp[i, j] - dot) * scale
        dq[:, c0:c0 + dh] = np.dot(ds, kh)
        dk[:, c0:c0 + dh] = np.dot(ds.T, qh)
    return dq, dk, dv


if USE_NUMBA:
    layernorm_fwd, layernorm_bwd = nb_layernorm_fwd, nb_layernorm_bwd
    softmax_fwd, softmax_bwd = nb_softmax_fwd, nb_softmax_bwd
    # numpy's SIMD tanh beats a scalar jitted loop (benchmarks/bench_kernels.py)
    gelu_fwd, gelu_bwd = np_gelu_fwd, np_gelu_bwd
    attention_fwd, attention_bwd = nb_attention_fwd, nb_attention_bwd
else:
    layernorm_fwd, layernorm_bwd = np_layernorm_fwd, np_layernorm_bwd
    softmax_fwd, softmax_bwd = np_softmax_fwd, np_softmax_bwd
    gelu_fwd, gelu_bwd = np_gelu_fwd, np_gelu_bwd
    attention_fwd, attention_bwd = np_attention_fwd, np_attention_bwd

BACKEND = "numba" if USE_NUMBA else "numpy"
