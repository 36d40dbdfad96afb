"""Fused forward/backward kernels for the test-time-training scan.

Each kernel walks one sequence token by token:

    loss_t = |f(k_t; W_{t-1}) - v_t|^2
    W_t    = W_{t-1} - eta * grad_W loss_t
    out_t  = f(q_t; W_t)

The backward kernels re-run the forward recursion per sequence, keep every
intermediate state, and then sweep the adjoints in reverse. Two
implementations exist for every kernel: ``@njit`` loops (default) and a
numpy version vectorised over the batch (``TTT4REC_NUMBA=0``).
"""
import math

import numpy as np

from . import _accel
from ._accel import njit, prange
from .tensor import gelu_np, gelu_prime_np, gelu_second_np

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# numpy fallback keeps per-chunk state histories under this many float64s
_NUMPY_STATE_BUDGET = 8_000_000


@njit
def _cdf(x):
    return 0.5 * (1.0 + math.erf(x * _SQRT_HALF))


@njit
def _pdf(x):
    return math.exp(-0.5 * x * x) * _INV_SQRT_2PI


# ---------------------------------------------------------------- linear, numba

@njit(parallel=True)
def _linear_forward_nb(K, V, Q, W0, mask, eta, out, losses, Wn, bad):
    B, n, D = K.shape
    c = 2.0 * eta
    for b in prange(B):
        W = W0.copy()
        e = np.empty(D)
        bad[b] = -1
        for t in range(n):
            if not mask[b, t]:
                for i in range(D):
                    out[b, t, i] = 0.0
                losses[b, t] = 0.0
                continue
            loss = 0.0
            for i in range(D):
                s = 0.0
                for j in range(D):
                    s += W[i, j] * K[b, t, j]
                e[i] = s - V[b, t, i]
                loss += e[i] * e[i]
            losses[b, t] = loss
            finite = math.isfinite(loss)
            for i in range(D):
                ce = c * e[i]
                for j in range(D):
                    w = W[i, j] - ce * K[b, t, j]
                    W[i, j] = w
                    if not math.isfinite(w):
                        finite = False
            for i in range(D):
                s = 0.0
                for j in range(D):
                    s += W[i, j] * Q[b, t, j]
                out[b, t, i] = s
            if not finite:
                bad[b] = t
                break
        Wn[b] = W


@njit(parallel=True)
def _linear_backward_nb(K, V, Q, W0, mask, eta, gout, dK, dV, dQ, dW0):
    B, n, D = K.shape
    c = 2.0 * eta
    for b in prange(B):
        Ws = np.empty((n + 1, D, D))
        Ws[0] = W0
        e = np.empty(D)
        for t in range(n):
            Ws[t + 1] = Ws[t]
            if not mask[b, t]:
                continue
            for i in range(D):
                s = 0.0
                for j in range(D):
                    s += Ws[t, i, j] * K[b, t, j]
                e[i] = s - V[b, t, i]
            for i in range(D):
                ce = c * e[i]
                for j in range(D):
                    Ws[t + 1, i, j] = Ws[t, i, j] - ce * K[b, t, j]
        A = np.zeros((D, D))
        de = np.empty(D)
        for t in range(n - 1, -1, -1):
            if not mask[b, t]:
                for i in range(D):
                    dK[b, t, i] = 0.0
                    dV[b, t, i] = 0.0
                    dQ[b, t, i] = 0.0
                continue
            for i in range(D):
                s = 0.0
                for j in range(D):
                    s += Ws[t, i, j] * K[b, t, j]
                e[i] = s - V[b, t, i]
            # out_t = W_t q_t
            for i in range(D):
                g = gout[b, t, i]
                for j in range(D):
                    A[i, j] += g * Q[b, t, j]
            for j in range(D):
                s = 0.0
                for i in range(D):
                    s += Ws[t + 1, i, j] * gout[b, t, i]
                dQ[b, t, j] = s
            # W_t = W_{t-1} - c e k^T,  e = W_{t-1} k - v
            for i in range(D):
                s = 0.0
                for j in range(D):
                    s += A[i, j] * K[b, t, j]
                de[i] = -c * s
                dV[b, t, i] = c * s
            for j in range(D):
                s1 = 0.0
                s2 = 0.0
                for i in range(D):
                    s1 += A[i, j] * e[i]
                    s2 += Ws[t, i, j] * de[i]
                dK[b, t, j] = -c * s1 + s2
            for i in range(D):
                for j in range(D):
                    A[i, j] += de[i] * K[b, t, j]
        dW0[b] = A


# ------------------------------------------------------------------- mlp, numba

@njit
def _mv(M, x, out):
    for i in range(M.shape[0]):
        s = 0.0
        for j in range(M.shape[1]):
            s += M[i, j] * x[j]
        out[i] = s


@njit
def _mtv(M, x, out):
    for j in range(M.shape[1]):
        out[j] = 0.0
    for i in range(M.shape[0]):
        xi = x[i]
        for j in range(M.shape[1]):
            out[j] += M[i, j] * xi


@njit
def _mlp_update(W1, W2, k, v, c, z, a, r, dl):
    """One inner step in place. Returns the pre-update loss; fills z, a, r, delta."""
    H = W1.shape[0]
    D = W2.shape[0]
    _mv(W1, k, z)
    for h in range(H):
        a[h] = z[h] * _cdf(z[h])
    _mv(W2, a, r)
    loss = 0.0
    for i in range(D):
        r[i] -= v[i]
        loss += r[i] * r[i]
    _mtv(W2, r, dl)
    for h in range(H):
        dl[h] *= _cdf(z[h]) + z[h] * _pdf(z[h])
    for i in range(D):
        cr = c * r[i]
        for h in range(H):
            W2[i, h] -= cr * a[h]
    for h in range(H):
        cd = c * dl[h]
        for j in range(D):
            W1[h, j] -= cd * k[j]
    return loss


@njit
def _all_finite(M):
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            if not math.isfinite(M[i, j]):
                return False
    return True


@njit(parallel=True)
def _mlp_forward_nb(K, V, Q, W10, W20, mask, eta, out, losses, W1n, W2n, bad):
    B, n, D = K.shape
    H = W10.shape[0]
    c = 2.0 * eta
    for b in prange(B):
        W1 = W10.copy()
        W2 = W20.copy()
        z = np.empty(H)
        a = np.empty(H)
        dl = np.empty(H)
        r = np.empty(D)
        bad[b] = -1
        for t in range(n):
            if not mask[b, t]:
                for i in range(D):
                    out[b, t, i] = 0.0
                losses[b, t] = 0.0
                continue
            loss = _mlp_update(W1, W2, K[b, t], V[b, t], c, z, a, r, dl)
            losses[b, t] = loss
            _mv(W1, Q[b, t], z)
            for h in range(H):
                a[h] = z[h] * _cdf(z[h])
            _mv(W2, a, r)
            for i in range(D):
                out[b, t, i] = r[i]
            if not (math.isfinite(loss) and _all_finite(W1) and _all_finite(W2)):
                bad[b] = t
                break
        W1n[b] = W1
        W2n[b] = W2


@njit(parallel=True)
def _mlp_backward_nb(K, V, Q, W10, W20, mask, eta, gout, dK, dV, dQ, dW10, dW20):
    B, n, D = K.shape
    H = W10.shape[0]
    c = 2.0 * eta
    for b in prange(B):
        W1s = np.empty((n + 1, H, D))
        W2s = np.empty((n + 1, D, H))
        W1s[0] = W10
        W2s[0] = W20
        z = np.empty(H)
        a = np.empty(H)
        dl = np.empty(H)
        r = np.empty(D)
        for t in range(n):
            W1s[t + 1] = W1s[t]
            W2s[t + 1] = W2s[t]
            if mask[b, t]:
                _mlp_update(W1s[t + 1], W2s[t + 1], K[b, t], V[b, t], c, z, a, r, dl)

        A1 = np.zeros((H, D))
        A2 = np.zeros((D, H))
        s = np.empty(H)
        gp = np.empty(H)
        delta = np.empty(H)
        zq = np.empty(H)
        aq = np.empty(H)
        daq = np.empty(H)
        dzq = np.empty(H)
        ddelta = np.empty(H)
        dz = np.empty(H)
        da = np.empty(H)
        dr = np.empty(D)
        tmpD = np.empty(D)
        tmpH = np.empty(H)
        for t in range(n - 1, -1, -1):
            if not mask[b, t]:
                for i in range(D):
                    dK[b, t, i] = 0.0
                    dV[b, t, i] = 0.0
                    dQ[b, t, i] = 0.0
                continue
            W1p = W1s[t]
            W2p = W2s[t]
            W1t = W1s[t + 1]
            W2t = W2s[t + 1]
            k = K[b, t]
            q = Q[b, t]
            g = gout[b, t]
            # recompute the step's intermediates
            _mv(W1p, k, z)
            for h in range(H):
                a[h] = z[h] * _cdf(z[h])
                gp[h] = _cdf(z[h]) + z[h] * _pdf(z[h])
            _mv(W2p, a, r)
            for i in range(D):
                r[i] -= V[b, t, i]
            _mtv(W2p, r, s)
            for h in range(H):
                delta[h] = s[h] * gp[h]
            # output o = W2t gelu(W1t q)
            _mv(W1t, q, zq)
            for h in range(H):
                aq[h] = zq[h] * _cdf(zq[h])
            for i in range(D):
                gi = g[i]
                for h in range(H):
                    A2[i, h] += gi * aq[h]
            _mtv(W2t, g, daq)
            for h in range(H):
                dzq[h] = daq[h] * (_cdf(zq[h]) + zq[h] * _pdf(zq[h]))
            for h in range(H):
                dh = dzq[h]
                for j in range(D):
                    A1[h, j] += dh * q[j]
            _mtv(W1t, dzq, tmpD)
            for j in range(D):
                dQ[b, t, j] = tmpD[j]
            # W1t = W1p - c delta k^T
            _mv(A1, k, ddelta)
            for h in range(H):
                ddelta[h] *= -c
            _mtv(A1, delta, tmpD)
            for j in range(D):
                dK[b, t, j] = -c * tmpD[j]
            # W2t = W2p - c r a^T
            _mv(A2, a, dr)
            for i in range(D):
                dr[i] *= -c
            _mtv(A2, r, da)
            for h in range(H):
                da[h] *= -c
            # delta = s * gelu'(z),  s = W2p^T r
            for h in range(H):
                tmpH[h] = ddelta[h] * gp[h]  # ds
                zh = z[h]
                dz[h] = ddelta[h] * s[h] * _pdf(zh) * (2.0 - zh * zh)
            for i in range(D):
                ri = r[i]
                for h in range(H):
                    A2[i, h] += ri * tmpH[h]
            _mv(W2p, tmpH, tmpD)
            for i in range(D):
                dr[i] += tmpD[i]
            # r = W2p a - v
            for i in range(D):
                dV[b, t, i] = -dr[i]
            for i in range(D):
                di = dr[i]
                for h in range(H):
                    A2[i, h] += di * a[h]
            _mtv(W2p, dr, tmpH)
            for h in range(H):
                dz[h] += (da[h] + tmpH[h]) * gp[h]
            # z = W1p k
            for h in range(H):
                dh = dz[h]
                for j in range(D):
                    A1[h, j] += dh * k[j]
            _mtv(W1p, dz, tmpD)
            for j in range(D):
                dK[b, t, j] += tmpD[j]
        dW10[b] = A1
        dW20[b] = A2


# ---------------------------------------------------------------- numpy fallback

def _bmv(M, x):
    return np.matmul(M, x[..., None])[..., 0]


def _bmtv(M, x):
    return np.matmul(x[..., None, :], M)[..., 0, :]


def _linear_forward_np(K, V, Q, W0, mask, eta):
    B, n, D = K.shape
    W = np.broadcast_to(W0, (B, D, D)).copy()
    out = np.zeros((B, n, D))
    losses = np.zeros((B, n))
    bad = np.full(B, -1, dtype=np.int64)
    m = mask.astype(np.float64)
    for t in range(n):
        k, v, q = K[:, t], V[:, t], Q[:, t]
        e = _bmv(W, k) - v
        losses[:, t] = (e * e).sum(-1) * m[:, t]
        W -= ((2.0 * eta) * m[:, t])[:, None, None] * (e[:, :, None] * k[:, None, :])
        out[:, t] = _bmv(W, q) * m[:, t, None]
        newly = (bad < 0) & ~np.isfinite(W).all(axis=(1, 2))
        bad[newly] = t
    return out, losses, W, bad


def _linear_backward_np(K, V, Q, W0, mask, eta, gout):
    B, n, D = K.shape
    c = 2.0 * eta
    m = mask.astype(np.float64)
    Ws = np.empty((n + 1, B, D, D))
    Ws[0] = W0
    for t in range(n):
        k = K[:, t]
        e = _bmv(Ws[t], k) - V[:, t]
        Ws[t + 1] = Ws[t] - (c * m[:, t])[:, None, None] * (e[:, :, None] * k[:, None, :])
    A = np.zeros((B, D, D))
    dK, dV, dQ = np.zeros_like(K), np.zeros_like(V), np.zeros_like(Q)
    for t in range(n - 1, -1, -1):
        mt = m[:, t]
        k, q = K[:, t], Q[:, t]
        g = gout[:, t] * mt[:, None]
        e = _bmv(Ws[t], k) - V[:, t]
        A = A + g[:, :, None] * q[:, None, :]
        dQ[:, t] = _bmtv(Ws[t + 1], g)
        de = -c * _bmv(A, k) * mt[:, None]
        dV[:, t] = -de
        dK[:, t] = -c * _bmtv(A, e) * mt[:, None] + _bmtv(Ws[t], de)
        A = A + de[:, :, None] * k[:, None, :]
    return dK, dV, dQ, A.sum(axis=0)


def _mlp_step_np(W1, W2, k, v, c, mt):
    z = _bmv(W1, k)
    a = gelu_np(z)
    gp = gelu_prime_np(z)
    r = _bmv(W2, a) - v
    s = _bmtv(W2, r)
    delta = s * gp
    cm = (c * mt)[:, None, None]
    W2n = W2 - cm * (r[:, :, None] * a[:, None, :])
    W1n = W1 - cm * (delta[:, :, None] * k[:, None, :])
    return W1n, W2n, (z, a, gp, r, s, delta)


def _mlp_forward_np(K, V, Q, W10, W20, mask, eta):
    B, n, D = K.shape
    H = W10.shape[0]
    W1 = np.broadcast_to(W10, (B, H, D)).copy()
    W2 = np.broadcast_to(W20, (B, D, H)).copy()
    out = np.zeros((B, n, D))
    losses = np.zeros((B, n))
    bad = np.full(B, -1, dtype=np.int64)
    m = mask.astype(np.float64)
    for t in range(n):
        W1, W2, (_, _, _, r, _, _) = _mlp_step_np(W1, W2, K[:, t], V[:, t], 2.0 * eta, m[:, t])
        losses[:, t] = (r * r).sum(-1) * m[:, t]
        out[:, t] = _bmv(W2, gelu_np(_bmv(W1, Q[:, t]))) * m[:, t, None]
        finite = np.isfinite(W1).all(axis=(1, 2)) & np.isfinite(W2).all(axis=(1, 2))
        newly = (bad < 0) & ~finite
        bad[newly] = t
    return out, losses, W1, W2, bad


def _mlp_backward_np(K, V, Q, W10, W20, mask, eta, gout):
    B, n, D = K.shape
    H = W10.shape[0]
    c = 2.0 * eta
    m = mask.astype(np.float64)
    W1s = np.empty((n + 1, B, H, D))
    W2s = np.empty((n + 1, B, D, H))
    W1s[0], W2s[0] = W10, W20
    for t in range(n):
        W1s[t + 1], W2s[t + 1], _ = _mlp_step_np(W1s[t], W2s[t], K[:, t], V[:, t], c, m[:, t])
    A1 = np.zeros((B, H, D))
    A2 = np.zeros((B, D, H))
    dK, dV, dQ = np.zeros_like(K), np.zeros_like(V), np.zeros_like(Q)
    for t in range(n - 1, -1, -1):
        mt = m[:, t][:, None]
        k, q = K[:, t], Q[:, t]
        g = gout[:, t] * mt
        W1p, W2p, W1t, W2t = W1s[t], W2s[t], W1s[t + 1], W2s[t + 1]
        _, _, (z, a, gp, r, s, delta) = _mlp_step_np(W1p, W2p, k, V[:, t], c, m[:, t])
        zq = _bmv(W1t, q)
        aq = gelu_np(zq)
        A2 = A2 + g[:, :, None] * aq[:, None, :]
        dzq = _bmtv(W2t, g) * gelu_prime_np(zq)
        A1 = A1 + dzq[:, :, None] * q[:, None, :]
        dQ[:, t] = _bmtv(W1t, dzq)
        ddelta = -c * _bmv(A1, k) * mt
        dk = -c * _bmtv(A1, delta) * mt
        dr = -c * _bmv(A2, a) * mt
        da = -c * _bmtv(A2, r) * mt
        ds = ddelta * gp
        dz = ddelta * s * gelu_second_np(z)
        A2 = A2 + r[:, :, None] * ds[:, None, :]
        dr = dr + _bmv(W2p, ds)
        dV[:, t] = -dr
        A2 = A2 + dr[:, :, None] * a[:, None, :]
        dz = dz + (da + _bmtv(W2p, dr)) * gp
        A1 = A1 + dz[:, :, None] * k[:, None, :]
        dK[:, t] = dk + _bmtv(W1p, dz)
    return dK, dV, dQ, A1.sum(axis=0), A2.sum(axis=0)


def _chunks(B, per_sequence):
    size = max(1, _NUMPY_STATE_BUDGET // max(per_sequence, 1))
    for lo in range(0, B, size):
        yield slice(lo, min(B, lo + size))


# ------------------------------------------------------------------ public API

def _prep(*arrays):
    return [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]


def linear_scan_forward(K, V, Q, W0, mask, eta):
    """Returns ``(out, losses, W_final, bad)``; ``bad[b]`` is the first non-finite token or -1."""
    K, V, Q, W0 = _prep(K, V, Q, W0)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _accel.use_numba():
        B, n, D = K.shape
        out = np.empty((B, n, D))
        losses = np.empty((B, n))
        Wn = np.empty((B, D, D))
        bad = np.empty(B, dtype=np.int64)
        _linear_forward_nb(K, V, Q, W0, mask, float(eta), out, losses, Wn, bad)
        return out, losses, Wn, bad
    return _linear_forward_np(K, V, Q, W0, mask, float(eta))


def linear_scan_backward(K, V, Q, W0, mask, eta, gout):
    """Gradients ``(dK, dV, dQ, dW0)`` of ``sum(gout * out)``."""
    K, V, Q, W0, gout = _prep(K, V, Q, W0, gout)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    B, n, D = K.shape
    if _accel.use_numba():
        dK, dV, dQ = np.empty_like(K), np.empty_like(V), np.empty_like(Q)
        dW0 = np.empty((B, D, D))
        _linear_backward_nb(K, V, Q, W0, mask, float(eta), gout, dK, dV, dQ, dW0)
        return dK, dV, dQ, dW0.sum(axis=0)
    dK, dV, dQ = np.zeros_like(K), np.zeros_like(V), np.zeros_like(Q)
    dW0 = np.zeros_like(W0)
    for sl in _chunks(B, (n + 1) * D * D):
        parts = _linear_backward_np(K[sl], V[sl], Q[sl], W0, mask[sl], float(eta), gout[sl])
        dK[sl], dV[sl], dQ[sl] = parts[:3]
        dW0 += parts[3]
    return dK, dV, dQ, dW0


def mlp_scan_forward(K, V, Q, W10, W20, mask, eta):
    """Returns ``(out, losses, W1_final, W2_final, bad)``."""
    K, V, Q, W10, W20 = _prep(K, V, Q, W10, W20)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _accel.use_numba():
        B, n, D = K.shape
        H = W10.shape[0]
        out = np.empty((B, n, D))
        losses = np.empty((B, n))
        W1n = np.empty((B, H, D))
        W2n = np.empty((B, D, H))
        bad = np.empty(B, dtype=np.int64)
        _mlp_forward_nb(K, V, Q, W10, W20, mask, float(eta), out, losses, W1n, W2n, bad)
        return out, losses, W1n, W2n, bad
    return _mlp_forward_np(K, V, Q, W10, W20, mask, float(eta))


def mlp_scan_backward(K, V, Q, W10, W20, mask, eta, gout):
    """Gradients ``(dK, dV, dQ, dW10, dW20)`` of ``sum(gout * out)``."""
    K, V, Q, W10, W20, gout = _prep(K, V, Q, W10, W20, gout)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    B, n, D = K.shape
    H = W10.shape[0]
    if _accel.use_numba():
        dK, dV, dQ = np.empty_like(K), np.empty_like(V), np.empty_like(Q)
        dW10 = np.empty((B, H, D))
        dW20 = np.empty((B, D, H))
        _mlp_backward_nb(K, V, Q, W10, W20, mask, float(eta), gout, dK, dV, dQ, dW10, dW20)
        return dK, dV, dQ, dW10.sum(axis=0), dW20.sum(axis=0)
    dK, dV, dQ = np.zeros_like(K), np.zeros_like(V), np.zeros_like(Q)
    dW10, dW20 = np.zeros_like(W10), np.zeros_like(W20)
    for sl in _chunks(B, 2 * (n + 1) * H * D):
        parts = _mlp_backward_np(K[sl], V[sl], Q[sl], W10, W20, mask[sl], float(eta), gout[sl])
        dK[sl], dV[sl], dQ[sl] = parts[:3]
        dW10 += parts[3]
        dW20 += parts[4]
    return dK, dV, dQ, dW10, dW20
