"""Hot numeric kernels: numba-jitted loops with pure-numpy fallbacks.

Three convolution kernels (NHWC forward, input gradient, weight gradient)
and the O(n^3) min-cost assignment core. ``get_kernels`` returns either
variant by name; module-level aliases point at the variant selected by
:mod:`proto_align.backend`. The numba path compiles lazily on first call
(cached on disk), runs single-threaded, and keeps IEEE semantics so results
are deterministic; it differs from the numpy path only by summation order.
"""

from types import SimpleNamespace

import numpy as np

from . import backend


# ---------------------------------------------------------------------------
# pure-numpy variants
# ---------------------------------------------------------------------------

def _out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    b, h, w, cin = x.shape
    ho, wo = _out_hw(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, ho, wo, kh, kw, cin),
        (s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]))
    return win.reshape(b * ho * wo, kh * kw * cin), ho, wo


def conv2d_forward_numpy(x, w, stride, pad):
    b = x.shape[0]
    kh, kw, cin, cout = w.shape
    col, ho, wo = _im2col(x, kh, kw, stride, pad)
    return (col @ w.reshape(kh * kw * cin, cout)).reshape(b, ho, wo, cout)


def conv2d_grad_weight_numpy(gy, x, kh, kw, stride, pad):
    cin, cout = x.shape[3], gy.shape[3]
    col, ho, wo = _im2col(x, kh, kw, stride, pad)
    gw = col.T @ gy.reshape(-1, cout)
    return gw.reshape(kh, kw, cin, cout)


def conv2d_grad_input_numpy(gy, w, h, wdim, stride, pad):
    b, ho, wo, cout = gy.shape
    kh, kw, cin, _ = w.shape
    gcol = (gy.reshape(-1, cout) @ w.reshape(-1, cout).T)
    gcol = gcol.reshape(b, ho, wo, kh, kw, cin)
    gxp = np.zeros((b, h + 2 * pad, wdim + 2 * pad, cin))
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, ki:ki + ho * stride:stride,
                kj:kj + wo * stride:stride, :] += gcol[:, :, :, ki, kj, :]
    return gxp[:, pad:pad + h, pad:pad + wdim, :]


def lap_min_assign_numpy(cost):
    """Min-cost perfect matching of a square matrix; returns row->col.

    Shortest-augmenting-path formulation with row/column potentials
    (O(n^3)). Ties resolve to whatever augmenting order produces; callers
    needing a canonical optimum refine on top of this.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j]: 1-based row on col j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[match[j] - 1] = j - 1
    return row_to_col


# ---------------------------------------------------------------------------
# numba variants (compiled lazily; same contracts as above)
# ---------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def conv2d_forward(x, w, stride, pad):
        b, h, wd, cin = x.shape
        kh, kw, _, cout = w.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        y = np.zeros((b, ho, wo, cout))
        for bb in range(b):
            for i in range(ho):
                for j in range(wo):
                    for ki in range(kh):
                        ii = i * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = j * stride + kj - pad
                            if jj < 0 or jj >= wd:
                                continue
                            for c in range(cin):
                                xv = x[bb, ii, jj, c]
                                for o in range(cout):
                                    y[bb, i, j, o] += xv * w[ki, kj, c, o]
        return y

    @njit(cache=True)
    def conv2d_grad_weight(gy, x, kh, kw, stride, pad):
        b, h, wd, cin = x.shape
        _, ho, wo, cout = gy.shape
        gw = np.zeros((kh, kw, cin, cout))
        for bb in range(b):
            for i in range(ho):
                for j in range(wo):
                    for ki in range(kh):
                        ii = i * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = j * stride + kj - pad
                            if jj < 0 or jj >= wd:
                                continue
                            for c in range(cin):
                                xv = x[bb, ii, jj, c]
                                for o in range(cout):
                                    gw[ki, kj, c, o] += xv * gy[bb, i, j, o]
        return gw

    @njit(cache=True)
    def conv2d_grad_input(gy, w, h, wdim, stride, pad):
        b, ho, wo, cout = gy.shape
        kh, kw, cin, _ = w.shape
        gx = np.zeros((b, h, wdim, cin))
        for bb in range(b):
            for i in range(ho):
                for j in range(wo):
                    for ki in range(kh):
                        ii = i * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = j * stride + kj - pad
                            if jj < 0 or jj >= wdim:
                                continue
                            for o in range(cout):
                                gv = gy[bb, i, j, o]
                                for c in range(cin):
                                    gx[bb, ii, jj, c] += gv * w[ki, kj, c, o]
        return gx

    # same source as the numpy variant, compiled
    lap_min_assign = njit(cache=True)(lap_min_assign_numpy)

    return SimpleNamespace(
        name="numba",
        conv2d_forward=conv2d_forward,
        conv2d_grad_weight=conv2d_grad_weight,
        conv2d_grad_input=conv2d_grad_input,
        lap_min_assign=lap_min_assign,
    )


_NUMPY = SimpleNamespace(
    name="numpy",
    conv2d_forward=conv2d_forward_numpy,
    conv2d_grad_weight=conv2d_grad_weight_numpy,
    conv2d_grad_input=conv2d_grad_input_numpy,
    lap_min_assign=lap_min_assign_numpy,
)

_NUMBA = None


def get_kernels(name=None):
    """Kernel namespace for ``name`` (default: the active backend)."""
    global _NUMBA
    name = name or backend.active_backend()
    if name == "numpy":
        return _NUMPY
    if name != "numba":
        raise ValueError(f"unknown kernel backend {name!r}")
    if _NUMBA is None:
        _NUMBA = _build_numba()
    return _NUMBA


_active = get_kernels()

conv2d_forward = _active.conv2d_forward
conv2d_grad_weight = _active.conv2d_grad_weight
conv2d_grad_input = _active.conv2d_grad_input
lap_min_assign = _active.lap_min_assign
