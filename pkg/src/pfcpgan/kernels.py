"""2-D convolution kernels, the hot inner loops of the whole package.

Two interchangeable backends compute identical values (up to float summation
order):

* ``numba`` — direct-loop kernels compiled with ``@njit``. Deterministic even
  under ``prange``: every output element is reduced by a single thread in a
  fixed order.
* ``numpy`` — shift-and-GEMM: one skinny matmul per kernel tap, no im2col
  temporaries. Pure-python fallback; competitive wherever BLAS is good.

The active backend is chosen at import from the ``PFCPGAN_BACKEND``
environment variable (``numba``, ``numpy`` or ``auto``) and can be switched
at runtime with :func:`set_backend`. ``benchmarks/bench_kernels.py`` compares
the two.

Array layout is channels-last throughout: images ``(N, H, W, C)``, weights
``(kh, kw, Cin, Cout)``. Transposed (stride-2 upsampling) convolutions reuse
these three kernels with the forward/backward roles swapped, so no separate
deconvolution code exists.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from .errors import ConfigError

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    HAS_NUMBA = False
    prange = range

    def njit(*args, **kwargs):  # noqa: D103 - decorator stub
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w, :] = x
    return xp


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return ho, wo


# ---------------------------------------------------------------------------
# numpy backend: im2col + one GEMM
#
# The column buffer is laid out (N*Ho*Wo, kh*kw*Cin) so the contraction runs
# as a single fat matrix product; on a decent BLAS this is the fastest path
# for the wide layers that dominate training.
# ---------------------------------------------------------------------------


def _im2col(xp, kh, kw, stride, ho, wo):
    n, _, _, cin = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, cin), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                :, i : i + ho * stride : stride, j : j + wo * stride : stride, :
            ]
    return cols.reshape(n * ho * wo, kh * kw * cin)


def _np_conv2d_forward_ex(x, w, stride, pad):
    kh, kw, cin, cout = w.shape
    n = x.shape[0]
    ho, wo = conv_output_hw(x.shape[1], x.shape[2], kh, kw, stride, pad)
    cols = _im2col(_pad_input(x, pad), kh, kw, stride, ho, wo)
    out = cols @ w.reshape(kh * kw * cin, cout)
    return out.reshape(n, ho, wo, cout), cols


def _np_conv2d_forward(x, w, stride, pad):
    return _np_conv2d_forward_ex(x, w, stride, pad)[0]


def _np_conv2d_backward_input(grad, w, x_shape, stride, pad):
    n, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    ho, wo = grad.shape[1], grad.shape[2]
    g2 = np.ascontiguousarray(grad).reshape(-1, cout)
    dcols = (g2 @ w.reshape(kh * kw * cin, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += dcols[
                :, :, :, i, j, :
            ]
    if pad == 0:
        return dxp
    return dxp[:, pad : pad + h, pad : pad + wd, :]


def _np_conv2d_backward_weight(grad, x, w_shape, stride, pad, ctx=None):
    kh, kw, cin, cout = w_shape
    ho, wo = grad.shape[1], grad.shape[2]
    cols = ctx if ctx is not None else _im2col(_pad_input(x, pad), kh, kw, stride, ho, wo)
    g2 = np.ascontiguousarray(grad).reshape(-1, cout)
    return (cols.T @ g2).reshape(w_shape)


# ---------------------------------------------------------------------------
# numba backend: jitted gather/scatter + BLAS contraction
#
# The im2col gather and col2im scatter are the memory-bound hot loops; numba
# runs them at copy speed, and the arithmetic happens in one fat GEMM.
# prange parallelises over the batch axis only, so every output element is
# written by exactly one thread in a fixed order: results are bit-identical
# for any thread count.
# ---------------------------------------------------------------------------


@njit(parallel=True, fastmath=True, cache=True)
def _nb_gather_cols(xp, stride, kh, kw, ho, wo, cols):  # pragma: no cover - jitted
    n_, hp, wp, cin = xp.shape
    for n in prange(n_):
        for oh in range(ho):
            rbase = (n * ho + oh) * wo
            ih0 = oh * stride
            for ow in range(wo):
                row = cols[rbase + ow]
                iw0 = ow * stride
                idx = 0
                for i in range(kh):
                    for j in range(kw):
                        xrow = xp[n, ih0 + i, iw0 + j]
                        for c in range(cin):
                            row[idx] = xrow[c]
                            idx += 1


@njit(parallel=True, fastmath=True, cache=True)
def _nb_scatter_cols(dcols, stride, kh, kw, ho, wo, dxp):  # pragma: no cover - jitted
    n_, hp, wp, cin = dxp.shape
    for n in prange(n_):
        for oh in range(ho):
            rbase = (n * ho + oh) * wo
            ih0 = oh * stride
            for ow in range(wo):
                row = dcols[rbase + ow]
                iw0 = ow * stride
                idx = 0
                for i in range(kh):
                    for j in range(kw):
                        drow = dxp[n, ih0 + i, iw0 + j]
                        for c in range(cin):
                            drow[c] += row[idx]
                            idx += 1


def _numba_im2col(x, kh, kw, stride, pad, ho, wo):
    xp = np.ascontiguousarray(_pad_input(x, pad))
    cin = x.shape[3]
    cols = np.empty((x.shape[0] * ho * wo, kh * kw * cin), dtype=x.dtype)
    _nb_gather_cols(xp, stride, kh, kw, ho, wo, cols)
    return cols


def _numba_conv2d_forward_ex(x, w, stride, pad):
    kh, kw, cin, cout = w.shape
    n = x.shape[0]
    ho, wo = conv_output_hw(x.shape[1], x.shape[2], kh, kw, stride, pad)
    cols = _numba_im2col(x, kh, kw, stride, pad, ho, wo)
    out = cols @ np.ascontiguousarray(w.reshape(kh * kw * cin, cout))
    return out.reshape(n, ho, wo, cout), cols


def _numba_conv2d_forward(x, w, stride, pad):
    return _numba_conv2d_forward_ex(x, w, stride, pad)[0]


def _numba_conv2d_backward_input(grad, w, x_shape, stride, pad):
    n, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    ho, wo = grad.shape[1], grad.shape[2]
    g2 = np.ascontiguousarray(grad).reshape(-1, cout)
    dcols = g2 @ np.ascontiguousarray(w.reshape(kh * kw * cin, cout)).T
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=grad.dtype)
    _nb_scatter_cols(np.ascontiguousarray(dcols), stride, kh, kw, ho, wo, dxp)
    if pad == 0:
        return dxp
    return dxp[:, pad : pad + h, pad : pad + wd, :]


def _numba_conv2d_backward_weight(grad, x, w_shape, stride, pad, ctx=None):
    kh, kw, cin, cout = w_shape
    ho, wo = grad.shape[1], grad.shape[2]
    cols = ctx if ctx is not None else _numba_im2col(x, kh, kw, stride, pad, ho, wo)
    g2 = np.ascontiguousarray(grad).reshape(-1, cout)
    return (cols.T @ g2).reshape(w_shape)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_BACKENDS = {
    "numpy": (
        _np_conv2d_forward,
        _np_conv2d_backward_input,
        _np_conv2d_backward_weight,
        _np_conv2d_forward_ex,
    ),
}
if HAS_NUMBA:
    _BACKENDS["numba"] = (
        _numba_conv2d_forward,
        _numba_conv2d_backward_input,
        _numba_conv2d_backward_weight,
        _numba_conv2d_forward_ex,
    )

_active = None


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the resolved name."""
    global _active
    if name == "auto":
        name = "numba" if "numba" in _BACKENDS else "numpy"
    if name not in _BACKENDS:
        raise ConfigError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    _active = name
    return name


def active_backend() -> str:
    return _active


def _is_pointwise(kh, kw, stride, pad):
    return kh == 1 and kw == 1 and stride == 1 and pad == 0


def conv2d_forward(x, w, stride=1, pad=1):
    kh, kw, cin, cout = w.shape
    if _is_pointwise(kh, kw, stride, pad):
        # plain matmul; identical on every backend
        n, h, wd, _ = x.shape
        return (x.reshape(-1, cin) @ w[0, 0]).reshape(n, h, wd, cout)
    return _BACKENDS[_active][0](x, w, stride, pad)


def conv2d_forward_ex(x, w, stride=1, pad=1):
    """Forward pass plus a backend-specific workspace that
    :func:`conv2d_backward_weight` can reuse to skip redundant gathers."""
    kh, kw, cin, cout = w.shape
    if _is_pointwise(kh, kw, stride, pad):
        return conv2d_forward(x, w, stride, pad), None
    return _BACKENDS[_active][3](x, w, stride, pad)


def conv2d_backward_input(grad, w, x_shape, stride=1, pad=1):
    kh, kw, cin, cout = w.shape
    if _is_pointwise(kh, kw, stride, pad):
        return (grad.reshape(-1, cout) @ w[0, 0].T).reshape(x_shape)
    return _BACKENDS[_active][1](grad, w, x_shape, stride, pad)


def conv2d_backward_weight(grad, x, w_shape, stride=1, pad=1, ctx=None):
    kh, kw, cin, cout = w_shape
    if _is_pointwise(kh, kw, stride, pad):
        dw = x.reshape(-1, cin).T @ grad.reshape(-1, cout)
        return dw.reshape(w_shape)
    return _BACKENDS[_active][2](grad, x, w_shape, stride, pad, ctx)


_env = os.environ.get("PFCPGAN_BACKEND", "auto")
try:
    set_backend(_env)
except ConfigError:
    warnings.warn(f"PFCPGAN_BACKEND={_env!r} not recognised; using auto")
    set_backend("auto")
