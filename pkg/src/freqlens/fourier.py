"""2-D spectral toolkit: exact DFT with centered layout, box frequency filters,
spectral entropy, Fourier-image rendering, and hybrid image construction.

Conventions
-----------
* A single image channel is an ``(H, W)`` real array; a color image is
  ``(C, H, W)`` with values nominally in ``[0, 1]``.
* Spectra are center-shifted: the zero-frequency bin sits at row ``H // 2``,
  column ``W // 2``. The forward transform is unnormalized; the inverse
  carries the ``1 / (H * W)`` factor.
* ``low_pass`` keeps bin ``(i, j)`` iff ``|i - W//2| <= bw/2`` and
  ``|j - H//2| <= bw/2`` (a centered box), with the degenerate ``bw == 0``
  box passing nothing. ``high_pass`` is the exact set complement at equal
  ``bw``, so ``high_pass`` at ``bw == 0`` is the identity filter and
  LP + HP reassembles the input exactly at every bandwidth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

FILTER_KINDS = ("low_pass", "high_pass", "all_pass")

# Residual imaginary magnitude above this after an inverse transform of a
# supposedly real signal indicates an asymmetric mask bug.
_IMAG_RESIDUAL_TOL = 1e-3


@dataclass(frozen=True)
class FreqFilterSpec:
    """Box filter selector: kind in {low_pass, high_pass, all_pass} plus bandwidth.

    ``bw`` is ignored for ``all_pass``. Bandwidth is measured in spectrum bins
    (full box side length, centered on the zero-frequency bin).
    """

    kind: str
    bw: int = 0

    def __post_init__(self) -> None:
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"FreqFilterSpec: unknown kind {self.kind!r}, expected one of {FILTER_KINDS}")
        if not isinstance(self.bw, (int, np.integer)) or isinstance(self.bw, bool):
            raise ValueError(f"FreqFilterSpec: bw must be an integer, got {self.bw!r}")
        if self.bw < 0:
            raise ValueError(f"FreqFilterSpec: bw must be >= 0, got {self.bw}")


ALL_PASS = FreqFilterSpec("all_pass")


@dataclass
class Spectrum:
    """Center-shifted complex spectrum of one image channel."""

    data: np.ndarray  # (H, W) complex128

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"Spectrum: expected a 2-D array, got shape {arr.shape}")
        self.data = arr.astype(np.complex128, copy=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _require_channel(x: np.ndarray, op: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ValueError(f"{op}: expected an (H, W) channel, got shape {arr.shape}")
    return arr


def dft2(channel: np.ndarray) -> Spectrum:
    """Exact 2-D DFT of one real channel, returned center-shifted.

    Any (H, W) size is supported, including primes. Unnormalized forward
    transform: the DC bin equals H * W times the channel mean.
    """
    arr = _require_channel(channel, "dft2").astype(np.float64, copy=False)
    spec = np.fft.fftshift(np.fft.fft2(arr))
    return Spectrum(spec)


def idft2(spectrum: Spectrum) -> np.ndarray:
    """Inverse of :func:`dft2`; returns the real (H, W) array.

    A residual imaginary part above 1e-3 is logged as a warning: for spectra
    produced from real images and symmetric masks it indicates a mask bug.
    """
    full = np.fft.ifft2(np.fft.ifftshift(spectrum.data))
    resid = float(np.max(np.abs(full.imag))) if full.size else 0.0
    if resid > _IMAG_RESIDUAL_TOL:
        logger.warning("idft2: residual imaginary magnitude %.3g exceeds %.1g", resid, _IMAG_RESIDUAL_TOL)
    return full.real


def lowpass_mask(height: int, width: int, bw: int) -> np.ndarray:
    """Boolean centered-box mask. ``bw == 0`` passes nothing."""
    if height < 1 or width < 1:
        raise ValueError(f"lowpass_mask: bad spectrum shape ({height}, {width})")
    if bw < 0:
        raise ValueError(f"lowpass_mask: bw must be >= 0, got {bw}")
    if bw == 0:
        return np.zeros((height, width), dtype=bool)
    cy, cx = height // 2, width // 2
    jj = np.abs(np.arange(height) - cy)[:, None]
    ii = np.abs(np.arange(width) - cx)[None, :]
    half = bw / 2.0
    return (ii <= half) & (jj <= half)


def filter_mask(height: int, width: int, f: FreqFilterSpec) -> np.ndarray:
    """Boolean keep-mask for a filter spec. high_pass is the exact complement
    of low_pass at equal bandwidth."""
    if f.kind == "all_pass":
        return np.ones((height, width), dtype=bool)
    lp = lowpass_mask(height, width, f.bw)
    return lp if f.kind == "low_pass" else ~lp


def apply_filter(spectrum: Spectrum, f: FreqFilterSpec) -> Spectrum:
    """Zero out the bins a filter rejects. The input spectrum is not mutated."""
    h, w = spectrum.height, spectrum.width
    if f.kind != "all_pass" and f.bw > 2 * max(h, w):
        raise ValueError(f"apply_filter: bw {f.bw} exceeds 2*max(W,H) = {2 * max(h, w)}")
    mask = filter_mask(h, w, f)
    return Spectrum(np.where(mask, spectrum.data, 0.0))


def filter_array(x: np.ndarray, f: FreqFilterSpec) -> np.ndarray:
    """Apply a box filter along the trailing two axes of any real array.

    Returns float64. Output is NOT re-clipped to [0, 1]; a high-pass result is
    signed by design.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"filter_array: expected trailing (H, W) axes, got shape {arr.shape}")
    if f.kind == "all_pass":
        return arr.copy()
    h, w = arr.shape[-2], arr.shape[-1]
    if f.bw > 2 * max(h, w):
        raise ValueError(f"filter_array: bw {f.bw} exceeds 2*max(W,H) = {2 * max(h, w)}")
    mask = np.fft.ifftshift(filter_mask(h, w, f))
    spec = np.fft.fft2(arr, axes=(-2, -1))
    out = np.fft.ifft2(spec * mask, axes=(-2, -1))
    return out.real


def filter_image(image: np.ndarray, f: FreqFilterSpec) -> np.ndarray:
    """Per-channel frequency filtering of an (H, W) or (C, H, W) image."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise ValueError(f"filter_image: expected (H, W) or (C, H, W), got shape {arr.shape}")
    return filter_array(arr, f)


def fourier_image(image: np.ndarray) -> np.ndarray:
    """Displayable log-magnitude spectrum: log(1 + |F|), channel-averaged,
    min-max normalized to [0, 1]. Constant images give a lone bright DC bin."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"fourier_image: expected (H, W) or (C, H, W), got shape {arr.shape}")
    mags = [np.log1p(np.abs(dft2(ch).data)) for ch in arr]
    mean = np.mean(mags, axis=0)
    lo, hi = float(mean.min()), float(mean.max())
    if hi - lo < 1e-12:
        return np.zeros_like(mean)
    return (mean - lo) / (hi - lo)


def entropy(image: np.ndarray) -> float:
    """Spectral entropy: treat each channel's |spectrum| as a probability mass
    over bins and take -sum(P ln P); channels are averaged.

    An all-zero channel contributes 0 (logged as a warning). The value is
    bounded by ln(H * W), attained when magnitude is uniform across bins.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"entropy: expected (H, W) or (C, H, W), got shape {arr.shape}")
    vals = []
    for ch in arr:
        z = np.abs(dft2(ch).data)
        total = z.sum()
        if total <= 0.0:
            logger.warning("entropy: all-zero channel, contributing 0")
            vals.append(0.0)
            continue
        p = z / total
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0.0, p * np.log(p), 0.0)
        vals.append(float(-terms.sum()))
    return float(np.mean(vals))


def hybrid(image_lf: np.ndarray, image_hf: np.ndarray, bw: int) -> np.ndarray:
    """Low-pass of the first image plus high-pass of the second, clipped to [0, 1].

    Because the two masks are exact complements, hybrid(x, x, bw) == x for any
    in-range image before clipping.
    """
    a = np.asarray(image_lf, dtype=np.float64)
    b = np.asarray(image_hf, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"hybrid: shape mismatch {a.shape} vs {b.shape}")
    lf = filter_image(a, FreqFilterSpec("low_pass", bw))
    hf = filter_image(b, FreqFilterSpec("high_pass", bw))
    return np.clip(lf + hf, 0.0, 1.0)
