"""Training losses: reconstruction, perceptual, texture. All with exact
gradients with respect to the super-resolved image.

The perceptual term compares fixed deterministic features of prediction
and target. Two extractor variants exist: the scattering transform
itself (default) and a frozen random 3-layer convolutional stack with
half-wave rectification. Neither needs external weights; absolute loss
values therefore differ from setups built on pretrained classifier
features, while the loss's role (feature-space similarity) is preserved.

The texture term penalizes the Frobenius distance between Gram matrices
of the prediction's scattering features and the swapped features. Gram
matrices are normalized by spatial size by default so their magnitude
does not grow with image area; pass gram_normalize=False for the raw
variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .model import ACT_IDENTITY, ACT_RELU, ConvLayer, conv2d, conv2d_backward
from .scattering import ScatterConfig, scatter_vjp, scatter_with_tape


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three loss terms; at least one must be positive."""

    w_rec: float = 1.0
    w_p: float = 0.05
    w_t: float = 0.01

    def __post_init__(self):
        if self.w_rec < 0 or self.w_p < 0 or self.w_t < 0:
            raise ShapeError("loss weights must be nonnegative")
        if self.w_rec == 0 and self.w_p == 0 and self.w_t == 0:
            raise ShapeError("at least one loss weight must be positive")


# ---------------------------------------------------------------------------
# Reconstruction loss
# ---------------------------------------------------------------------------

def loss_rec(i_sr: np.ndarray, i_hr: np.ndarray):
    """Mean absolute error and its gradient wrt i_sr (sign(0) = 0)."""
    i_sr = np.asarray(i_sr, dtype=np.float64)
    i_hr = np.asarray(i_hr, dtype=np.float64)
    if i_sr.shape != i_hr.shape:
        raise ShapeError(f"image dims differ: {i_sr.shape} vs {i_hr.shape}")
    diff = i_sr - i_hr
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


# ---------------------------------------------------------------------------
# Gram matrix and texture loss
# ---------------------------------------------------------------------------

def gram(fm: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Channel co-occurrence matrix G_ab = sum_x fm_a(x) fm_b(x) [/ (H*W)]."""
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeError(f"expected C x H x W feature map, got {fm.ndim}D")
    c = fm.shape[0]
    flat = fm.reshape(c, -1)
    g = flat @ flat.T
    if normalize:
        g /= flat.shape[1]
    return g


def loss_texture(f_sr: np.ndarray, f_swapped: np.ndarray,
                 gram_normalize: bool = True):
    """Frobenius distance of Gram matrices over the feature size.

    Returns (value, grad wrt f_sr). value = |Gr(f_sr) - Gr(f_swapped)|_F
    divided by the feature size C*H*W; the gradient chains through the
    Gram product and the norm, and is 0 at a zero distance.
    """
    f_sr = np.asarray(f_sr, dtype=np.float64)
    f_swapped = np.asarray(f_swapped, dtype=np.float64)
    if f_sr.shape != f_swapped.shape:
        raise ShapeError(f"feature dims differ: {f_sr.shape} vs {f_swapped.shape}")
    c, h, w = f_sr.shape
    feature_size = c * h * w
    dg = gram(f_sr, gram_normalize) - gram(f_swapped, gram_normalize)
    norm = float(np.linalg.norm(dg))
    value = norm / feature_size
    if norm == 0.0:
        return 0.0, np.zeros_like(f_sr)
    # d|DG|_F/dG = DG/|DG|_F;  dG/dF with G = F F^T (/HW) gives 2 DG F (/HW)
    coeff = dg / (norm * feature_size)
    flat = f_sr.reshape(c, -1)
    gflat = 2.0 * (coeff @ flat)
    if gram_normalize:
        gflat /= h * w
    return value, gflat.reshape(f_sr.shape)


# ---------------------------------------------------------------------------
# Perceptual extractor
# ---------------------------------------------------------------------------

class PerceptualExtractor:
    """Deterministic differentiable feature operator for the perceptual loss.

    Construct via the `scattering_features` or `random_conv` factories.
    """

    VARIANT_SCATTERING = "scattering"
    VARIANT_RANDOM_CONV = "fixed-random-conv"

    def __init__(self, variant: str, scatter_cfg: ScatterConfig | None = None,
                 conv_layers: list[ConvLayer] | None = None):
        self.variant = variant
        self.scatter_cfg = scatter_cfg
        self.conv_layers = conv_layers

    @classmethod
    def scattering_features(cls, cfg: ScatterConfig | None = None):
        return cls(cls.VARIANT_SCATTERING, scatter_cfg=cfg or ScatterConfig())

    @classmethod
    def random_conv(cls, seed: int = 0, channels: int = 8, n_layers: int = 3,
                    ksize: int = 3):
        """Frozen random conv stack, rectified except for the last layer."""
        rng = np.random.default_rng(seed)
        layers = []
        c_in = 1
        for i in range(n_layers):
            act = ACT_RELU if i < n_layers - 1 else ACT_IDENTITY
            fan_in = c_in * ksize * ksize
            kernel = rng.standard_normal((channels, c_in, ksize, ksize))
            kernel *= np.sqrt(2.0 / fan_in)
            layers.append(ConvLayer(kernel=kernel,
                                    bias=np.zeros(channels),
                                    activation=act))
            c_in = channels
        return cls(cls.VARIANT_RANDOM_CONV, conv_layers=layers)

    def features_with_tape(self, img: np.ndarray):
        """Feature map (N, H, W) plus the tape for vjp()."""
        img = np.asarray(img, dtype=np.float64)
        if self.variant == self.VARIANT_SCATTERING:
            return scatter_with_tape(img, self.scatter_cfg)
        x = img[None]
        tape = []
        for layer in self.conv_layers:
            out = conv2d(x, layer)
            mask = out > 0 if layer.activation == ACT_RELU else None
            tape.append((x, mask))
            x = np.where(mask, out, 0) if mask is not None else out
        return x, tape

    def features(self, img: np.ndarray) -> np.ndarray:
        return self.features_with_tape(img)[0]

    def vjp(self, tape, grad_features: np.ndarray) -> np.ndarray:
        """Backpropagate a feature-space gradient to the input image."""
        if self.variant == self.VARIANT_SCATTERING:
            return scatter_vjp(tape, grad_features)
        g = np.asarray(grad_features)
        for layer, (x, mask) in zip(reversed(self.conv_layers),
                                    reversed(tape)):
            if mask is not None:
                g = np.where(mask, g, 0)
            _, _, g = conv2d_backward(g, layer, x)
        return g[0]


def loss_perceptual(i_sr: np.ndarray, i_hr: np.ndarray,
                    ext: PerceptualExtractor,
                    hr_features: np.ndarray | None = None):
    """Per-channel Frobenius feature distance, averaged by feature size.

    value = (1/S) * sum_i |theta_i(i_sr) - theta_i(i_hr)|_F with S the
    total feature element count; grad is exact through the extractor.
    hr_features may carry a precomputed ext.features(i_hr) (training
    loops evaluate the same target many times).
    """
    i_sr = np.asarray(i_sr, dtype=np.float64)
    i_hr = np.asarray(i_hr, dtype=np.float64)
    if i_sr.shape != i_hr.shape:
        raise ShapeError(f"image dims differ: {i_sr.shape} vs {i_hr.shape}")
    f_sr, tape = ext.features_with_tape(i_sr)
    f_hr = ext.features(i_hr) if hr_features is None else hr_features
    value, g_feat = _perceptual_from_features(f_sr, f_hr)
    return value, ext.vjp(tape, g_feat)


def _perceptual_from_features(f_sr: np.ndarray, f_hr: np.ndarray):
    diff = f_sr - f_hr
    s = diff.size
    norms = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
    value = float(norms.sum() / s)
    g_feat = np.zeros_like(diff)
    nz = norms > 0
    g_feat[nz] = diff[nz] / (norms[nz, None, None] * s)
    return value, g_feat


# ---------------------------------------------------------------------------
# Combined loss
# ---------------------------------------------------------------------------

@dataclass
class LossConfig:
    """Everything loss_total needs besides the images."""

    weights: LossWeights = field(default_factory=LossWeights)
    scatter: ScatterConfig = field(default_factory=ScatterConfig)
    extractor: PerceptualExtractor | None = None
    gram_normalize: bool = True

    def __post_init__(self):
        if self.extractor is None:
            self.extractor = PerceptualExtractor.scattering_features(self.scatter)


def loss_total(i_sr: np.ndarray, i_hr: np.ndarray,
               f_swapped: np.ndarray | None, cfg: LossConfig,
               hr_features: np.ndarray | None = None):
    """Weighted sum of the three losses and its gradient wrt i_sr.

    The texture term compares the scattering features of i_sr with the
    swapped features, so its gradient backpropagates through the
    scattering transform; that pass runs in i_sr's precision (float32
    stays float32). When the perceptual extractor is that same
    transform, one forward/backward pass is shared by both terms.
    hr_features optionally carries precomputed extractor features of
    i_hr (they are constant across a training run).
    """
    w = cfg.weights
    if w.w_t > 0 and f_swapped is None:
        raise ShapeError("texture loss requires swapped features")
    i_sr = np.asarray(i_sr)
    i_hr = np.asarray(i_hr)
    if i_sr.shape != i_hr.shape:
        raise ShapeError(f"image dims differ: {i_sr.shape} vs {i_hr.shape}")
    value = 0.0
    grad = np.zeros(i_sr.shape, dtype=np.float64)
    if w.w_rec > 0:
        v, g = loss_rec(i_sr, i_hr)
        value += w.w_rec * v
        grad += w.w_rec * g

    ext = cfg.extractor
    share = (
        w.w_t > 0 and w.w_p > 0
        and ext.variant == PerceptualExtractor.VARIANT_SCATTERING
        and ext.scatter_cfg == cfg.scatter
    )
    if share:
        f_sr, tape = scatter_with_tape(i_sr, cfg.scatter)
        f_hr = ext.features(i_hr) if hr_features is None else hr_features
        vp, g_feat_p = _perceptual_from_features(
            np.asarray(f_sr, dtype=np.float64), f_hr)
        vt, g_feat_t = loss_texture(f_sr, f_swapped, cfg.gram_normalize)
        value += w.w_p * vp + w.w_t * vt
        grad += scatter_vjp(tape, w.w_p * g_feat_p + w.w_t * g_feat_t)
        return value, grad

    if w.w_p > 0:
        v, g = loss_perceptual(i_sr, i_hr, ext, hr_features=hr_features)
        value += w.w_p * v
        grad += w.w_p * g
    if w.w_t > 0:
        f_sr, tape = scatter_with_tape(i_sr, cfg.scatter)
        v, g_feat = loss_texture(f_sr, f_swapped, cfg.gram_normalize)
        value += w.w_t * v
        grad += w.w_t * scatter_vjp(tape, g_feat)
    return value, grad
