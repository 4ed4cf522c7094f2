"""2-D discrete Fourier analysis over the last two axes.

Spectra are unshifted: bin ``(0, 0)`` is DC. Every function accepts any
number of leading axes, so an ``(N, C, H, W)`` feature map is transformed
per channel.

``fft2``, ``ifft2`` and ``unit_phase`` also accept :class:`~progkd.tensor.Tensor`
inputs, in which case the result carries gradients on the active tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

UNIT_PHASE_EPS = 1e-8
_SMALL_RADICES = (2, 3, 5, 7)
_DENSE_MAX = 64


@dataclass
class ComplexSpectrum:
    """Real and imaginary planes of a 2-D spectrum (arrays or tensors)."""

    re: np.ndarray | Tensor
    im: np.ndarray | Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.re.shape)

    def to_complex(self) -> np.ndarray:
        re = self.re.data if isinstance(self.re, Tensor) else self.re
        im = self.im.data if isinstance(self.im, Tensor) else self.im
        return re + 1j * im

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexSpectrum":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


# ----------------------------------------------------------------------------
# transforms


def dft2_direct(x: np.ndarray) -> ComplexSpectrum:
    """Literal double-sum DFT, ``O((HW)^2)``. Reference oracle only."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    hh = np.arange(h)
    ww = np.arange(w)
    out = np.empty(x.shape, dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            kernel = np.exp(-2j * np.pi * (np.outer(hh * u / h, np.ones(w)) + np.outer(np.ones(h), ww * v / w)))
            out[..., u, v] = (x * kernel).sum(axis=(-2, -1))
    return ComplexSpectrum.from_complex(out)


def _smallest_radix(n: int) -> int | None:
    for p in _SMALL_RADICES:
        if n % p == 0:
            return p
    return None


@lru_cache(maxsize=None)
def _dft_matrix(n: int, dtype=np.complex128) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n).astype(dtype)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int, dtype=np.complex128) -> np.ndarray:
    return np.exp(-2j * np.pi * np.outer(np.arange(p), np.arange(m)) / (p * m)).astype(dtype)


def _fft_last(x: np.ndarray) -> np.ndarray:
    """Mixed-radix decimation-in-time FFT along the last axis.

    Short lengths go straight to one dense DFT product, which is a single
    GEMM and beats the recursion there. Longer lengths split off factors
    2, 3, 5 and 7 recursively; any remaining length is handled densely.
    """
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    p = _smallest_radix(n)
    if n <= _DENSE_MAX or p is None or p == n:
        return x @ _dft_matrix(n, x.dtype.type).T
    m = n // p
    # sub-sequence r holds x[r], x[r + p], x[r + 2p], ...
    sub = np.swapaxes(x.reshape(*x.shape[:-1], m, p), -1, -2)
    y = _fft_last(np.ascontiguousarray(sub))
    y *= _twiddles(p, m, x.dtype.type)
    if p == 2:
        out = np.empty(x.shape, dtype=x.dtype)
        np.add(y[..., 0, :], y[..., 1, :], out=out[..., :m])
        np.subtract(y[..., 0, :], y[..., 1, :], out=out[..., m:])
        return out
    return np.matmul(_dft_matrix(p, x.dtype.type), y).reshape(*x.shape[:-1], n)


def _complex_dtype(x: np.ndarray):
    return np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128


def _fft2_complex(z: np.ndarray) -> np.ndarray:
    z = _fft_last(z.astype(_complex_dtype(z), copy=False))
    return np.swapaxes(_fft_last(np.ascontiguousarray(np.swapaxes(z, -1, -2))), -1, -2)


def _ifft2_complex(z: np.ndarray) -> np.ndarray:
    h, w = z.shape[-2:]
    return np.conj(_fft2_complex(np.conj(z))) / (h * w)


def fft2(x) -> ComplexSpectrum:
    """Forward 2-D transform of a real map over its last two axes."""
    if isinstance(x, Tensor):
        return _fft2_tensor(x)
    return ComplexSpectrum.from_complex(_fft2_complex(np.asarray(x)))


def ifft2(s: ComplexSpectrum):
    """Real part of the inverse transform."""
    if isinstance(s.re, Tensor) or isinstance(s.im, Tensor):
        return _ifft2_tensor(T.as_tensor(s.re), T.as_tensor(s.im))
    if s.re.shape != s.im.shape:
        raise ShapeError(f"ifft2: re {s.re.shape} and im {s.im.shape} differ")
    return _ifft2_complex(s.to_complex()).real


def _fft2_tensor(x: Tensor) -> ComplexSpectrum:
    z = _fft2_complex(x.data)
    dtype = x.data.dtype
    re = T._record(z.real.astype(dtype), (x,), lambda g: (_fft2_complex(g).real,))
    im = T._record(z.imag.astype(dtype), (x,), lambda g: (_fft2_complex(g).imag,))
    return ComplexSpectrum(re, im)


def _ifft2_tensor(re: Tensor, im: Tensor) -> Tensor:
    if re.shape != im.shape:
        raise ShapeError(f"ifft2: re {re.shape} and im {im.shape} differ")
    h, w = re.shape[-2:]
    out = _ifft2_complex(re.data + 1j * im.data).real.astype(re.data.dtype)

    def bw(g):
        f = _fft2_complex(g) / (h * w)
        return f.real, f.imag

    return T._record(out, (re, im), bw)


# ----------------------------------------------------------------------------
# decomposition


def amplitude(s: ComplexSpectrum) -> np.ndarray:
    z = s.to_complex()
    return np.sqrt(z.real ** 2 + z.imag ** 2)


def phase(s: ComplexSpectrum) -> np.ndarray:
    """Four-quadrant phase in ``(-pi, pi]``."""
    z = s.to_complex()
    return np.arctan2(z.imag, z.real)


def recompose(a: np.ndarray, p: np.ndarray) -> ComplexSpectrum:
    a = np.asarray(a)
    p = np.asarray(p)
    if a.shape != p.shape:
        raise ShapeError(f"recompose: amplitude {a.shape} and phase {p.shape} differ")
    return ComplexSpectrum(a * np.cos(p), a * np.sin(p))


def amplitude_swap(content: np.ndarray, style: np.ndarray) -> np.ndarray:
    """Keep the phase of ``content`` and take the amplitude of ``style``."""
    content = np.asarray(content)
    style = np.asarray(style)
    if content.shape != style.shape:
        raise ShapeError(f"amplitude_swap: content {content.shape} and style {style.shape} differ")
    return ifft2(recompose(amplitude(fft2(style)), phase(fft2(content))))


def unit_phase(s: ComplexSpectrum, eps: float = UNIT_PHASE_EPS) -> ComplexSpectrum:
    """Map every bin to ``(re, im) / max(|z|, eps)``.

    Bins with modulus above ``eps`` land on the unit circle; near-zero bins
    shrink toward the origin instead of taking an arbitrary angle.
    """
    if isinstance(s.re, Tensor) or isinstance(s.im, Tensor):
        return _unit_phase_tensor(T.as_tensor(s.re), T.as_tensor(s.im), eps)
    re, im = np.asarray(s.re), np.asarray(s.im)
    denom = np.maximum(np.sqrt(re ** 2 + im ** 2), eps)
    return ComplexSpectrum(re / denom, im / denom)


def _unit_phase_tensor(re: Tensor, im: Tensor, eps: float) -> ComplexSpectrum:
    r, i = re.data, im.data
    amp = np.sqrt(r * r + i * i)
    live = amp > eps
    denom = np.where(live, amp, eps)
    inv3 = np.where(live, 1.0 / np.maximum(amp, eps) ** 3, 0.0)

    def bw_re(g):
        return g / denom - g * r * r * inv3, -g * r * i * inv3

    def bw_im(g):
        return -g * i * r * inv3, g / denom - g * i * i * inv3

    return ComplexSpectrum(T._record(r / denom, (re, im), bw_re),
                           T._record(i / denom, (re, im), bw_im))
