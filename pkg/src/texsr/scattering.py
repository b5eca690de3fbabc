"""2D wavelet scattering transform with an oriented Morlet filter bank.

The transform cascades complex wavelet convolutions and modulus
nonlinearities, each branch finished by a Gaussian low-pass, producing
multiscale texture descriptors that are stable to deformation:

* order 0:  x * phi
* order 1:  |x * psi_{j1,l1}| * phi                      (J*L channels)
* order 2:  ||x * psi_{j1,l1}| * psi_{j2,l2}| * phi      (j2 > j1)

All convolutions are circular, carried out in the frequency domain. The
filters are built directly in the frequency domain by alias-summing the
closed-form Fourier transform of an elliptical Gabor envelope over
neighbouring spectral periods; the band-pass filters get an exact DC
correction (Morlet construction), making them annihilate constants.

A vector-Jacobian product (`scatter_vjp`) is provided so losses defined
on scattering coefficients can be differentiated back to the input
image. The modulus uses subgradient 0 at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as _fft

from .errors import ShapeError

_ALIAS_PERIODS = 2  # spectral periods summed on each side when sampling filters


@dataclass(frozen=True)
class ScatterConfig:
    """Parameters of the texture feature extractor.

    J dyadic scales, L orientations over [0, pi). With subsample=False
    (the pipeline default) outputs stay pixel-aligned with the input;
    with subsample=True the spatial dims shrink by 2**J. sigma0 and xi0
    are the mother-wavelet width and central frequency; scale j uses
    sigma0 * 2**j and xi0 / 2**j, the low-pass uses sigma0 * 2**(J-1).
    """

    J: int = 2
    L: int = 8
    subsample: bool = False
    sigma0: float = 0.8
    xi0: float = 3.0 * np.pi / 4.0

    def __post_init__(self):
        if self.J < 1 or self.L < 1:
            raise ShapeError(f"need J >= 1 and L >= 1, got J={self.J} L={self.L}")

    @property
    def channel_count(self) -> int:
        j, l = self.J, self.L
        return 1 + j * l + l * l * (j * (j - 1) // 2)


@dataclass(frozen=True)
class FilterBank:
    """Frequency-domain Morlet filters for one signal size.

    psi has shape (J, L, H, W); the Morlet construction makes the
    frequency response real-valued, so filters are stored as floats.
    phi is the (H, W) Gaussian low-pass. Immutable and shareable.
    """

    psi: np.ndarray
    phi: np.ndarray
    signal_dims: tuple[int, int]
    config: ScatterConfig = field(repr=False)


def _freq_gaussian(h: int, w: int, sigma: float, theta: float, xi: float,
                   slant: float) -> np.ndarray:
    """Alias-summed frequency response of an elliptical Gabor envelope.

    The envelope has width sigma along orientation theta and sigma/slant
    across it (in space); its Fourier transform is the Gaussian below,
    centered at the wavevector xi * (cos theta, sin theta). Summing over
    shifted spectral periods reproduces what sampling the spatial filter
    on the integer grid does to its spectrum.
    """
    wr = 2.0 * np.pi * np.fft.fftfreq(h)[:, None]
    wc = 2.0 * np.pi * np.fft.fftfreq(w)[None, :]
    ct, st = np.cos(theta), np.sin(theta)
    out = np.zeros((h, w))
    for mr in range(-_ALIAS_PERIODS, _ALIAS_PERIODS + 1):
        for mc in range(-_ALIAS_PERIODS, _ALIAS_PERIODS + 1):
            pr = wr + 2.0 * np.pi * mr
            pc = wc + 2.0 * np.pi * mc
            along = pr * ct + pc * st - xi
            across = -pr * st + pc * ct
            out += np.exp(-0.5 * ((sigma * along) ** 2
                                  + (sigma / slant * across) ** 2))
    return out


def build_filter_bank(cfg: ScatterConfig, dims: tuple[int, int]) -> FilterBank:
    """Build the J*L Morlet band-pass filters and the Gaussian low-pass.

    Scale j uses sigma_j = sigma0 * 2**j, xi_j = xi0 / 2**j, orientations
    theta_l = pi*l/L with ellipse slant 4/L. Each band-pass is
    DC-corrected: psi_hat(0) == 0 exactly.
    """
    h, w = dims
    if h < 2 ** cfg.J or w < 2 ** cfg.J:
        raise ShapeError(f"dims {h}x{w} too small for J={cfg.J}")
    slant = 4.0 / cfg.L
    psi = np.empty((cfg.J, cfg.L, h, w))
    for j in range(cfg.J):
        sigma = cfg.sigma0 * 2.0 ** j
        xi = cfg.xi0 / 2.0 ** j
        for l in range(cfg.L):
            theta = np.pi * l / cfg.L
            band = _freq_gaussian(h, w, sigma, theta, xi, slant)
            low = _freq_gaussian(h, w, sigma, theta, 0.0, slant)
            psi[j, l] = band - (band[0, 0] / low[0, 0]) * low
    phi = _freq_gaussian(h, w, cfg.sigma0 * 2.0 ** (cfg.J - 1), 0.0, 0.0, 1.0)
    return FilterBank(psi=psi, phi=phi, signal_dims=(h, w), config=cfg)


_BANK_CACHE: dict[tuple, FilterBank] = {}


def cached_filter_bank(cfg: ScatterConfig, dims: tuple[int, int]) -> FilterBank:
    """build_filter_bank with memoization on (config, dims)."""
    key = (cfg.J, cfg.L, cfg.subsample, cfg.sigma0, cfg.xi0, tuple(dims))
    bank = _BANK_CACHE.get(key)
    if bank is None:
        bank = _BANK_CACHE[key] = build_filter_bank(cfg, dims)
    return bank


def littlewood_paley(bank: FilterBank) -> tuple[float, float]:
    """(min, max) over frequencies of |phi|^2 + 0.5 * sum |psi|^2."""
    a = bank.phi ** 2 + 0.5 * np.sum(bank.psi ** 2, axis=(0, 1))
    return float(a.min()), float(a.max())


@dataclass
class ScatterTape:
    """Intermediates retained by scatter_with_tape for the VJP."""

    bank: FilterBank
    z1: np.ndarray            # (J, L, H, W) complex, first wavelet stage
    z2: list[tuple[int, int, np.ndarray]]  # (j1, j2, (L, L, H, W) complex)
    in_dtype: np.dtype


def _complex_dtype(dtype: np.dtype) -> np.dtype:
    return np.dtype(np.complex64) if dtype == np.float32 else np.dtype(np.complex128)


def _phase(z: np.ndarray) -> np.ndarray:
    """z / |z| with 0 where z == 0 (modulus subgradient at the origin)."""
    az = np.abs(z)
    out = np.zeros_like(z)
    nz = az > 0
    out[nz] = z[nz] / az[nz]
    return out


def _scatter_impl(img: np.ndarray, cfg: ScatterConfig, bank: FilterBank | None,
                  keep_tape: bool):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"expected 2D image, got {img.ndim}D")
    h, w = img.shape
    if h < 2 ** cfg.J or w < 2 ** cfg.J:
        raise ShapeError(f"dims {h}x{w} too small for J={cfg.J}")
    if bank is None:
        bank = cached_filter_bank(cfg, (h, w))
    elif bank.signal_dims != (h, w):
        raise ShapeError(f"filter bank built for {bank.signal_dims}, image is {h}x{w}")
    elif bank.config != cfg:
        raise ShapeError("filter bank was built for a different configuration")
    real_dtype = np.float32 if img.dtype == np.float32 else np.float64
    cdt = _complex_dtype(real_dtype)
    psi = bank.psi.astype(real_dtype, copy=False)
    phi = bank.phi.astype(real_dtype, copy=False)

    xf = _fft.fft2(img.astype(real_dtype, copy=False)).astype(cdt, copy=False)
    channels = [_fft.ifft2(xf * phi).real]
    z1 = _fft.ifft2(xf[None, None] * psi).astype(cdt, copy=False)
    u1f = _fft.fft2(np.abs(z1)).astype(cdt, copy=False)
    s1 = _fft.ifft2(u1f * phi).real
    for j1 in range(cfg.J):
        for l1 in range(cfg.L):
            channels.append(s1[j1, l1])
    z2_store: list[tuple[int, int, np.ndarray]] = []
    for j1 in range(cfg.J):
        for j2 in range(j1 + 1, cfg.J):
            z2 = _fft.ifft2(u1f[j1][:, None] * psi[j2][None]).astype(cdt, copy=False)
            if keep_tape:
                z2_store.append((j1, j2, z2))
            s2 = _fft.ifft2(_fft.fft2(np.abs(z2)) * phi).real
            for l1 in range(cfg.L):
                for l2 in range(cfg.L):
                    channels.append(s2[l1, l2])
    out = np.stack(channels).astype(real_dtype, copy=False)
    if cfg.subsample:
        step = 2 ** cfg.J
        out = np.ascontiguousarray(out[:, ::step, ::step])
    tape = ScatterTape(bank=bank, z1=z1, z2=z2_store,
                       in_dtype=np.dtype(real_dtype)) if keep_tape else None
    return out, tape


def scatter(img: np.ndarray, cfg: ScatterConfig,
            bank: FilterBank | None = None) -> np.ndarray:
    """Scattering coefficients of an image, shape (C, H, W).

    C = 1 + J*L + L^2 * J(J-1)/2. Channel order: order 0, then order 1
    indexed (j1, l1) row-major, then order 2 blocks for each (j1, j2)
    pair in lexicographic order, (l1, l2) row-major within a block.
    float32 input runs the whole cascade in single precision.
    """
    out, _ = _scatter_impl(img, cfg, bank, keep_tape=False)
    return out


def scatter_batch(imgs: Sequence[np.ndarray], cfg: ScatterConfig) -> list[np.ndarray]:
    """Scatter several same-sized images, building the filter bank once."""
    imgs = list(imgs)
    if not imgs:
        return []
    dims = np.asarray(imgs[0]).shape
    for i, im in enumerate(imgs):
        if np.asarray(im).shape != dims:
            raise ShapeError(
                f"batch image {i} has dims {np.asarray(im).shape}, expected {dims}"
            )
    bank = cached_filter_bank(cfg, dims)
    return [scatter(im, cfg, bank) for im in imgs]


def scatter_with_tape(img: np.ndarray, cfg: ScatterConfig,
                      bank: FilterBank | None = None):
    """scatter() that also returns the tape needed by scatter_vjp.

    Requires subsample=False (gradients are only used on the aligned
    pipeline path).
    """
    if cfg.subsample:
        raise ShapeError("tape/VJP only supported for subsample=False")
    return _scatter_impl(img, cfg, bank, keep_tape=True)


def scatter_vjp(tape: ScatterTape, grad_s: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient on the coefficients to the input image.

    The adjoint of circular convolution by a real frequency-domain
    filter k is convolution by the same k; the modulus backpropagates
    through the retained phase, 0 at zeros.
    """
    bank = tape.bank
    cfg = bank.config
    h, w = bank.signal_dims
    expected = (cfg.channel_count, h, w)
    if grad_s.shape != expected:
        raise ShapeError(f"grad shape {grad_s.shape}, expected {expected}")
    real_dtype = tape.in_dtype
    psi = bank.psi.astype(real_dtype, copy=False)
    phi = bank.phi.astype(real_dtype, copy=False)
    grad_s = grad_s.astype(real_dtype, copy=False)

    g_u1 = np.zeros((cfg.J, cfg.L, h, w), dtype=real_dtype)
    # order 0
    g_img = _fft.ifft2(_fft.fft2(grad_s[0]) * phi).real
    # order 1 low-pass stage
    c = 1
    g_u1 += _fft.ifft2(_fft.fft2(grad_s[c:c + cfg.J * cfg.L].reshape(
        cfg.J, cfg.L, h, w)) * phi).real
    c += cfg.J * cfg.L
    # order 2 paths feed back into the first-stage modulus fields
    for j1, j2, z2 in tape.z2:
        block = grad_s[c:c + cfg.L * cfg.L].reshape(cfg.L, cfg.L, h, w)
        c += cfg.L * cfg.L
        g_u2 = _fft.ifft2(_fft.fft2(block) * phi).real
        g_z2 = g_u2 * _phase(z2)
        g_u1[j1] += np.sum(_fft.ifft2(_fft.fft2(g_z2) * psi[j2][None]).real,
                           axis=1)
    g_z1 = g_u1 * _phase(tape.z1)
    g_img += np.sum(_fft.ifft2(_fft.fft2(g_z1) * psi).real, axis=(0, 1))
    return g_img.astype(real_dtype, copy=False)
