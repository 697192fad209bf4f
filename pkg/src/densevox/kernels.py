"""Direct 3D convolution kernels (forward, input gradient, weight gradient).

All convolutions are valid (no padding) cross-correlations over channels-last
volumes ``[N, D, H, W, C]``. The hot loops are JIT-compiled with numba and
parallelized over (batch, depth) slices or (channel-pair) blocks; every output
element is produced by exactly one thread with a fixed reduction order, so
results are bit-identical across runs and across thread counts.

Two forward kernels cover the shape regimes seen in this network:

* ``_conv_dot4`` reduces over the contiguous input-channel axis with four
  independent accumulator chains (good when ``Cin`` is large, ``Cout`` small).
* ``_conv_covec`` keeps a vector accumulator over the contiguous output
  channels (good when ``Cout`` is wide or ``Cin`` is tiny).

1x1x1 convolutions collapse to a plain matmul and are routed to BLAS.
The kernels are dtype-generic; float64 instantiations back the gradient
checks in the test suite.
"""

import ctypes
import ctypes.util

import numpy as np

from numba import config as _numba_config
from numba import njit, prange

# TBB in this toolchain is too old for numba's layer; skip the probe entirely
_numba_config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def _tune_allocator():
    """Keep glibc from mmap/munmap-ing the large per-step temporaries.

    Training allocates and frees hundreds of MB of activations per step;
    without raising these thresholds every large block takes a page-fault
    round trip. No-op on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 30))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(1 << 30))  # M_TRIM_THRESHOLD
    except (OSError, AttributeError, TypeError):
        pass


_tune_allocator()


@njit(parallel=True, fastmath=True, cache=True)
def _conv_dot4(x, wt, bias, out):
    # x [N,D,H,W,Cin], wt [Cout,k,k,k,Cin], out [N,Do,Ho,Wo,Cout]
    N, D, H, W, Cin = x.shape
    Cout = wt.shape[0]
    k = wt.shape[1]
    Do, Ho, Wo = D - k + 1, H - k + 1, W - k + 1
    cb4 = (Cout // 4) * 4
    for nd in prange(N * Do):
        n = nd // Do
        d = nd % Do
        zero = x[0, 0, 0, 0, 0] - x[0, 0, 0, 0, 0]
        for h in range(Ho):
            for w in range(Wo):
                for co in range(0, cb4, 4):
                    s0 = zero
                    s1 = zero
                    s2 = zero
                    s3 = zero
                    for a in range(k):
                        for b in range(k):
                            for c in range(k):
                                xs = x[n, d + a, h + b, w + c]
                                w0 = wt[co, a, b, c]
                                w1 = wt[co + 1, a, b, c]
                                w2 = wt[co + 2, a, b, c]
                                w3 = wt[co + 3, a, b, c]
                                for ci in range(Cin):
                                    v = xs[ci]
                                    s0 += v * w0[ci]
                                    s1 += v * w1[ci]
                                    s2 += v * w2[ci]
                                    s3 += v * w3[ci]
                    out[n, d, h, w, co] = s0 + bias[co]
                    out[n, d, h, w, co + 1] = s1 + bias[co + 1]
                    out[n, d, h, w, co + 2] = s2 + bias[co + 2]
                    out[n, d, h, w, co + 3] = s3 + bias[co + 3]
                for co in range(cb4, Cout):
                    s0 = zero
                    for a in range(k):
                        for b in range(k):
                            for c in range(k):
                                xs = x[n, d + a, h + b, w + c]
                                w0 = wt[co, a, b, c]
                                for ci in range(Cin):
                                    s0 += xs[ci] * w0[ci]
                    out[n, d, h, w, co] = s0 + bias[co]


@njit(parallel=True, fastmath=True, cache=True)
def _conv_covec(x, w, bias, out):
    # x [N,D,H,W,Cin], w [k,k,k,Cin,Cout], out [N,Do,Ho,Wo,Cout]
    N, D, H, W, Cin = x.shape
    k = w.shape[0]
    Cout = w.shape[4]
    Do, Ho, Wo = D - k + 1, H - k + 1, W - k + 1
    for nd in prange(N * Do):
        n = nd // Do
        d = nd % Do
        acc = np.empty(Cout, x.dtype)
        for h in range(Ho):
            for ww in range(Wo):
                for co in range(Cout):
                    acc[co] = bias[co]
                for a in range(k):
                    for b in range(k):
                        for c in range(k):
                            xs = x[n, d + a, h + b, ww + c]
                            wr = w[a, b, c]
                            for ci in range(Cin):
                                v = xs[ci]
                                wc = wr[ci]
                                for co in range(Cout):
                                    acc[co] += v * wc[co]
                out[n, d, h, ww] = acc


@njit(parallel=True, fastmath=True, cache=True)
def _dw_pairs(xt, gt, dw):
    # xt [Cin,N,D,H,W], gt [Cout,N,Do,Ho,Wo], dw [k,k,k,Cin,Cout]; k == 3
    Cin, N, D, H, W = xt.shape
    Cout = gt.shape[0]
    Do, Ho, Wo = gt.shape[2], gt.shape[3], gt.shape[4]
    k = dw.shape[0]
    for pair in prange(Cin * Cout):
        ci = pair // Cout
        co = pair % Cout
        zero = xt[0, 0, 0, 0, 0] - xt[0, 0, 0, 0, 0]
        for a in range(k):
            for b in range(k):
                s0 = zero
                s1 = zero
                s2 = zero
                for n in range(N):
                    for d in range(Do):
                        for h in range(Ho):
                            xr = xt[ci, n, d + a, h + b]
                            gr = gt[co, n, d, h]
                            for w in range(Wo):
                                g = gr[w]
                                s0 += xr[w] * g
                                s1 += xr[w + 1] * g
                                s2 += xr[w + 2] * g
                dw[a, b, 0, ci, co] = s0
                dw[a, b, 1, ci, co] = s1
                dw[a, b, 2, ci, co] = s2


def conv3d_forward(x, w, bias):
    """Valid cross-correlation. x [N,D,H,W,Cin], w [k,k,k,Cin,Cout] -> [N,Do,Ho,Wo,Cout]."""
    N, D, H, W, Cin = x.shape
    k = w.shape[0]
    Cout = w.shape[4]
    if k == 1:
        out2 = x.reshape(-1, Cin) @ w[0, 0, 0] + bias
        return out2.reshape(N, D, H, W, Cout)
    if Cout >= 32 or Cin <= 4:
        # vector accumulator over output channels; pad Cout to a lane multiple
        cop = -(-Cout // 8) * 8
        if cop != Cout and Cout >= 32:
            wp = np.zeros((k, k, k, Cin, cop), w.dtype)
            wp[..., :Cout] = w
            bp = np.zeros(cop, bias.dtype)
            bp[:Cout] = bias
            outp = np.empty((N, D - k + 1, H - k + 1, W - k + 1, cop), x.dtype)
            _conv_covec(np.ascontiguousarray(x), wp, bp, outp)
            return np.ascontiguousarray(outp[..., :Cout])
        out = np.empty((N, D - k + 1, H - k + 1, W - k + 1, Cout), x.dtype)
        _conv_covec(np.ascontiguousarray(x), np.ascontiguousarray(w), bias, out)
        return out
    out = np.empty((N, D - k + 1, H - k + 1, W - k + 1, Cout), x.dtype)
    wt = np.ascontiguousarray(w.transpose(4, 0, 1, 2, 3))
    _conv_dot4(np.ascontiguousarray(x), wt, bias, out)
    return out


def conv3d_input_grad(gy, w):
    """Gradient w.r.t. the conv input: full correlation of gy with the flipped kernel."""
    k = w.shape[0]
    Cin, Cout = w.shape[3], w.shape[4]
    N, Do, Ho, Wo = gy.shape[:4]
    if k == 1:
        dx2 = gy.reshape(-1, Cout) @ w[0, 0, 0].T
        return dx2.reshape(N, Do, Ho, Wo, Cin)
    p = k - 1
    gyp = np.zeros((N, Do + 2 * p, Ho + 2 * p, Wo + 2 * p, Cout), gy.dtype)
    gyp[:, p:p + Do, p:p + Ho, p:p + Wo, :] = gy
    wflip = np.ascontiguousarray(w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
    zero_bias = np.zeros(Cin, gy.dtype)
    return conv3d_forward(gyp, wflip, zero_bias)


def conv3d_weight_grad(x, gy, k):
    """Gradient w.r.t. the kernel tensor; accumulates x-window x gy products."""
    N, D, H, W, Cin = x.shape
    Do, Ho, Wo, Cout = gy.shape[1], gy.shape[2], gy.shape[3], gy.shape[4]
    if k == 1:
        dw = (x.reshape(-1, Cin).T @ gy.reshape(-1, Cout)).reshape(1, 1, 1, Cin, Cout)
        return np.ascontiguousarray(dw)
    dw = np.empty((k, k, k, Cin, Cout), x.dtype)
    m = N * Do * Ho * Wo
    if k == 3 and m >= 48_000:
        xt = np.ascontiguousarray(x.transpose(4, 0, 1, 2, 3))
        gt = np.ascontiguousarray(gy.transpose(4, 0, 1, 2, 3))
        _dw_pairs(xt, gt, dw)
    else:
        g2 = np.ascontiguousarray(gy).reshape(-1, Cout)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    xs = np.ascontiguousarray(
                        x[:, a:a + Do, b:b + Ho, c:c + Wo, :]
                    ).reshape(-1, Cin)
                    dw[a, b, c] = xs.T @ g2
    return dw
