"""Hot inner loops: LSTM recurrence and the segment-wise ESTOI correlation.

Each kernel has a numba-compiled version and a pure numpy version. The
numba path is used when numba imports and ``ESTOI_SEP_NUMBA`` is not
``0``; :func:`set_backend` switches at runtime (tests, benchmarks).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_backend = "numba" if numba is not None and os.environ.get("ESTOI_SEP_NUMBA", "1") != "0" else "numpy"


def backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    previous, _backend = _backend, name
    return previous


def set_threads(n):
    if numba is not None and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# LSTM recurrence. Gate layout along the last axis: input, forget, cell, output.

def _lstm_forward_loop(xproj, U):
    T, B, G = xproj.shape
    H = G // 4
    gates = np.empty((T, B, G))
    cells = np.empty((T, B, H))
    hidden = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = xproj[t] + np.dot(h, U)
        i = 0.5 * (1.0 + np.tanh(0.5 * z[:, :H]))
        f = 0.5 * (1.0 + np.tanh(0.5 * z[:, H:2 * H]))
        g = np.tanh(z[:, 2 * H:3 * H])
        o = 0.5 * (1.0 + np.tanh(0.5 * z[:, 3 * H:]))
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t, :, :H] = i
        gates[t, :, H:2 * H] = f
        gates[t, :, 2 * H:3 * H] = g
        gates[t, :, 3 * H:] = o
        cells[t] = c
        hidden[t] = h
    return gates, cells, hidden


def _lstm_backward_loop(gates, cells, U, dh_out):
    T, B, G = gates.shape
    H = G // 4
    dz = np.empty((T, B, G))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    UT = np.ascontiguousarray(U.T)
    for t in range(T - 1, -1, -1):
        i = gates[t, :, :H]
        f = gates[t, :, H:2 * H]
        g = gates[t, :, 2 * H:3 * H]
        o = gates[t, :, 3 * H:]
        c_prev = cells[t - 1] if t > 0 else zeros
        tc = np.tanh(cells[t])
        dh = dh_out[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[t, :, :H] = dc * g * i * (1.0 - i)
        dz[t, :, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[t, :, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[t, :, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = np.dot(dz[t], UT)
    return dz


if numba is not None:

    # scalar np.tanh is several times slower than exp/expm1 under numba
    @numba.njit(cache=True, inline="always", fastmath=True)
    def _sigmoid_nb(x):
        return 1.0 / (1.0 + np.exp(-x))

    @numba.njit(cache=True, inline="always", fastmath=True)
    def _tanh_nb(x):
        e = np.expm1(-2.0 * abs(x))
        r = -e / (2.0 + e)
        return r if x >= 0.0 else -r

    @numba.njit(cache=True, fastmath=True)
    def _lstm_forward_nb(xproj, U):
        T, B, G = xproj.shape
        H = G // 4
        gates = np.empty((T, B, G))
        cells = np.empty((T, B, H))
        hidden = np.empty((T, B, H))
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        for t in range(T):
            z = np.dot(h, U)
            for b in range(B):
                for k in range(H):
                    zi = z[b, k] + xproj[t, b, k]
                    zf = z[b, H + k] + xproj[t, b, H + k]
                    zg = z[b, 2 * H + k] + xproj[t, b, 2 * H + k]
                    zo = z[b, 3 * H + k] + xproj[t, b, 3 * H + k]
                    i = _sigmoid_nb(zi)
                    f = _sigmoid_nb(zf)
                    g = _tanh_nb(zg)
                    o = _sigmoid_nb(zo)
                    cc = f * c[b, k] + i * g
                    c[b, k] = cc
                    h[b, k] = o * _tanh_nb(cc)
                    gates[t, b, k] = i
                    gates[t, b, H + k] = f
                    gates[t, b, 2 * H + k] = g
                    gates[t, b, 3 * H + k] = o
                    cells[t, b, k] = cc
                    hidden[t, b, k] = h[b, k]
        return gates, cells, hidden

    @numba.njit(cache=True)
    def _lstm_backward_nb(gates, cells, U, dh_out):
        T, B, G = gates.shape
        H = G // 4
        dz = np.empty((T, B, G))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        UT = np.ascontiguousarray(U.T)
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for k in range(H):
                    i = gates[t, b, k]
                    f = gates[t, b, H + k]
                    g = gates[t, b, 2 * H + k]
                    o = gates[t, b, 3 * H + k]
                    c_prev = cells[t - 1, b, k] if t > 0 else 0.0
                    tc = _tanh_nb(cells[t, b, k])
                    dh = dh_out[t, b, k] + dh_next[b, k]
                    dc = dc_next[b, k] + dh * o * (1.0 - tc * tc)
                    dz[t, b, k] = dc * g * i * (1.0 - i)
                    dz[t, b, H + k] = dc * c_prev * f * (1.0 - f)
                    dz[t, b, 2 * H + k] = dc * i * (1.0 - g * g)
                    dz[t, b, 3 * H + k] = dh * tc * o * (1.0 - o)
                    dc_next[b, k] = dc * f
            dh_next = np.dot(dz[t], UT)
        return dz


def lstm_forward(xproj, U):
    """Run the recurrence on precomputed input projections ``(T, B, 4H)``.

    Returns activated gates ``(T, B, 4H)``, cell states and hidden states
    ``(T, B, H)``; initial states are zero.
    """
    xproj = np.ascontiguousarray(xproj, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    if _backend == "numba":
        return _lstm_forward_nb(xproj, U)
    return _lstm_forward_loop(xproj, U)


def lstm_backward(gates, cells, U, dh_out):
    """Gradient w.r.t. gate pre-activations given dL/dh for every step."""
    dh_out = np.ascontiguousarray(dh_out, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    if _backend == "numba":
        return _lstm_backward_nb(gates, cells, U, dh_out)
    return _lstm_backward_loop(gates, cells, U, dh_out)


# ---------------------------------------------------------------------------
# Row-then-column normalisation of J x N segments, vectorised over leading axes.

def _center_scale(a, axis, eps):
    centered = a - a.mean(axis=axis, keepdims=True)
    norm = np.sqrt((centered * centered).sum(axis=axis, keepdims=True))
    scale = np.maximum(norm, eps)
    return centered / scale, scale, norm > eps


def _center_scale_backward(out, scale, unclamped, grad, axis):
    proj = (out * grad).sum(axis=axis, keepdims=True)
    g = np.where(unclamped, grad - out * proj, grad) / scale
    return g - g.mean(axis=axis, keepdims=True)


def normalize_forward(seg, eps):
    """Temporal (row) then spectral (column) normalisation.

    Returns the normalised array and a cache for :func:`normalize_backward`.
    """
    rows, rscale, rok = _center_scale(seg, -1, eps)
    cols, cscale, cok = _center_scale(rows, -2, eps)
    return cols, (rows, rscale, rok, cols, cscale, cok)


def normalize_backward(cache, grad):
    rows, rscale, rok, cols, cscale, cok = cache
    g_rows = _center_scale_backward(cols, cscale, cok, grad, -2)
    return _center_scale_backward(rows, rscale, rok, g_rows, -1)


def _estoi_numpy(x, y, N, eps, want_grad):
    # x, y: (B, J, T) -> per-item d_final (B,) and d d_final / d x
    B, J, T = x.shape
    M = T - N + 1
    xs = np.lib.stride_tricks.sliding_window_view(x, N, axis=2).transpose(0, 2, 1, 3)
    ys = np.lib.stride_tricks.sliding_window_view(y, N, axis=2).transpose(0, 2, 1, 3)
    xt, cache = normalize_forward(xs, eps)
    yt, _ = normalize_forward(ys, eps)
    d = (xt * yt).sum(axis=(2, 3)).mean(axis=1) / N
    if not want_grad:
        return d, None
    gseg = normalize_backward(cache, np.broadcast_to(yt / (N * M), xt.shape))
    grad = np.zeros((B, J, T))
    for n in range(N):
        grad[:, :, n:n + M] += gseg[:, :, :, n].transpose(0, 2, 1)
    return d, grad


if numba is not None:

    @numba.njit(cache=True)
    def _normalize_nb(a, eps, out, rows, rscale, cscale):
        J, N = a.shape
        for j in range(J):
            mu = 0.0
            for n in range(N):
                mu += a[j, n]
            mu /= N
            s = 0.0
            for n in range(N):
                v = a[j, n] - mu
                rows[j, n] = v
                s += v * v
            nrm = np.sqrt(s)
            rscale[j] = nrm if nrm > eps else -eps
            div = nrm if nrm > eps else eps
            for n in range(N):
                rows[j, n] /= div
        for n in range(N):
            mu = 0.0
            for j in range(J):
                mu += rows[j, n]
            mu /= J
            s = 0.0
            for j in range(J):
                v = rows[j, n] - mu
                out[j, n] = v
                s += v * v
            nrm = np.sqrt(s)
            cscale[n] = nrm if nrm > eps else -eps
            div = nrm if nrm > eps else eps
            for j in range(J):
                out[j, n] /= div

    @numba.njit(cache=True)
    def _normalize_backward_nb(rows, rscale, out, cscale, g, gx):
        # negative scale marks an eps-clamped norm (no projection term)
        J, N = out.shape
        gr = np.empty((J, N))
        for n in range(N):
            scale = cscale[n]
            proj = 0.0
            if scale > 0.0:
                for j in range(J):
                    proj += out[j, n] * g[j, n]
            else:
                scale = -scale
            mu = 0.0
            for j in range(J):
                v = (g[j, n] - out[j, n] * proj) / scale
                gr[j, n] = v
                mu += v
            mu /= J
            for j in range(J):
                gr[j, n] -= mu
        for j in range(J):
            scale = rscale[j]
            proj = 0.0
            if scale > 0.0:
                for n in range(N):
                    proj += rows[j, n] * gr[j, n]
            else:
                scale = -scale
            mu = 0.0
            for n in range(N):
                v = (gr[j, n] - rows[j, n] * proj) / scale
                gx[j, n] = v
                mu += v
            mu /= N
            for n in range(N):
                gx[j, n] -= mu

    @numba.njit(cache=True)
    def _estoi_nb(x, y, N, eps, want_grad):
        B, J, T = x.shape
        M = T - N + 1
        d = np.zeros(B)
        grad = np.zeros((B, J, T))
        xt = np.empty((J, N))
        yt = np.empty((J, N))
        xrows = np.empty((J, N))
        yrows = np.empty((J, N))
        xr = np.empty(J)
        yr = np.empty(J)
        xc = np.empty(N)
        yc = np.empty(N)
        g = np.empty((J, N))
        gx = np.empty((J, N))
        w = 1.0 / (N * M)
        for b in range(B):
            total = 0.0
            for m in range(M):
                _normalize_nb(x[b, :, m:m + N], eps, xt, xrows, xr, xc)
                _normalize_nb(y[b, :, m:m + N], eps, yt, yrows, yr, yc)
                s = 0.0
                for j in range(J):
                    for n in range(N):
                        s += xt[j, n] * yt[j, n]
                total += s
                if want_grad:
                    for j in range(J):
                        for n in range(N):
                            g[j, n] = yt[j, n] * w
                    _normalize_backward_nb(xrows, xr, xt, xc, g, gx)
                    for j in range(J):
                        for n in range(N):
                            grad[b, j, m + n] += gx[j, n]
            d[b] = total * w
        return d, grad


def estoi_correlation(x_bands, y_bands, N, eps=1e-9, want_grad=True):
    """Mean segment correlation d_final between band matrices.

    ``x_bands`` and ``y_bands`` are ``(B, J, T)``. Returns ``(d, grad)``
    with ``d`` of shape ``(B,)`` and ``grad = d d / d x_bands`` (or None).
    """
    x = np.ascontiguousarray(x_bands, dtype=np.float64)
    y = np.ascontiguousarray(y_bands, dtype=np.float64)
    if _backend == "numba":
        d, grad = _estoi_nb(x, y, int(N), float(eps), bool(want_grad))
        return d, (grad if want_grad else None)
    return _estoi_numpy(x, y, int(N), float(eps), want_grad)
