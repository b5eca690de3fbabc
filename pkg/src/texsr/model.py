"""Small convolutional SR network with hand-rolled reverse-mode gradients.

The backbone is the classic 3-layer layout (9x9/64, 5x5/32, 5x5/1) with
an optional channel-concatenation point where a precomputed swapped
feature map enters the network. Convolutions are same-size with
replicate padding, so every activation stays pixel-aligned with the
input. The swapped features are treated as constants: no gradient flows
back into the swapper.

Gradients are exact reverse-mode; the rectifier uses subgradient 0 at 0.
All reductions run in fixed order, so a fixed seed yields a bit-identical
training trajectory on a given platform.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatVersionError,
    ShapeError,
    TruncatedPayloadError,
    MalformedHeaderError,
)
from .image_core import TENSOR_MAGIC, TENSOR_VERSION

ACT_RELU = "relu"
ACT_IDENTITY = "identity"

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1


@dataclass
class ConvLayer:
    """One same-padding convolution: kernel (C_out, C_in, k, k) + bias."""

    kernel: np.ndarray
    bias: np.ndarray
    activation: str = ACT_RELU

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"bad kernel shape {self.kernel.shape}")
        if self.kernel.shape[2] % 2 != 1:
            raise ShapeError("kernel size must be odd")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError("bias length must equal C_out")
        if self.activation not in (ACT_RELU, ACT_IDENTITY):
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]


@dataclass
class Network:
    """Ordered conv layers plus the optional concat point.

    concat_after = i means the swapped feature map is channel-stacked
    onto layer i's activation before layer i+1 consumes it.
    """

    layers: list[ConvLayer]
    concat_after: int | None = None
    concat_channels: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if self.concat_after is not None:
            if not 0 <= self.concat_after < len(self.layers) - 1:
                raise ShapeError("concat point must precede the final layer")
            if self.concat_channels < 1:
                raise ShapeError("concat_channels must be set with concat_after")
        for i in range(1, len(self.layers)):
            expect = self.layers[i - 1].c_out
            if self.concat_after == i - 1:
                expect += self.concat_channels
            if self.layers[i].c_in != expect:
                raise ShapeError(
                    f"layer {i} expects {self.layers[i].c_in} channels, "
                    f"chain provides {expect}"
                )
        last = self.layers[-1]
        if last.c_out != 1 or last.activation != ACT_IDENTITY:
            raise ShapeError("final layer must be 1-channel identity")


def init_srcnn(concat_channels: int | None = None, seed: int = 0,
               dtype=np.float32) -> Network:
    """Default backbone, Kaiming fan-in init, fixed seed, biases zero."""
    rng = np.random.default_rng(seed)
    extra = int(concat_channels or 0)
    spec = [
        (1, 64, 9, ACT_RELU),
        (64 + extra, 32, 5, ACT_RELU),
        (32, 1, 5, ACT_IDENTITY),
    ]
    layers = []
    for c_in, c_out, k, act in spec:
        fan_in = c_in * k * k
        gain = 2.0 if act == ACT_RELU else 1.0
        std = np.sqrt(gain / fan_in)
        kernel = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
        layers.append(ConvLayer(kernel=kernel,
                                bias=np.zeros(c_out, dtype=dtype),
                                activation=act))
    return Network(layers=layers,
                   concat_after=0 if extra else None,
                   concat_channels=extra)


# ---------------------------------------------------------------------------
# Convolution with replicate padding (im2col)
# ---------------------------------------------------------------------------

_SCRATCH = threading.local()


def _scratch_buffer(shape: tuple, dtype) -> np.ndarray:
    """Reusable per-thread workspace; avoids re-faulting big allocations."""
    cache = getattr(_SCRATCH, "bufs", None)
    if cache is None:
        cache = _SCRATCH.bufs = {}
    key = (shape, np.dtype(dtype).str)
    buf = cache.get(key)
    if buf is None:
        buf = cache[key] = np.empty(shape, dtype=dtype)
    return buf


def _window_rows(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    """All k*k window shifts of xp as rows: (C*k*k, out_h*out_w).

    Built with slice copies into a reused workspace; row order is
    (channel, row offset, col offset), matching kernel.reshape(c_out, -1).
    The result aliases the workspace: consume it before the next call
    with the same geometry.
    """
    c = xp.shape[0]
    cols = _scratch_buffer((c, k, k, out_h, out_w), xp.dtype)
    for dr in range(k):
        for dc in range(k):
            cols[:, dr, dc] = xp[:, dr:dr + out_h, dc:dc + out_w]
    return cols.reshape(c * k * k, out_h * out_w)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, H*W) patch matrix under replicate padding."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    return _window_rows(xp, k, x.shape[1], x.shape[2])


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Same-size convolution of a (C_in, H, W) input."""
    if x.shape[0] != layer.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, layer wants {layer.c_in}")
    _, h, w = x.shape
    cols = _im2col(x, layer.ksize)
    wmat = layer.kernel.reshape(layer.c_out, -1)
    out = wmat @ cols
    out += layer.bias[:, None]
    return out.reshape(layer.c_out, h, w)


def _fold_pad_adjoint(gxp: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of replicate padding: pad bands fold into the border."""
    if pad == 0:
        return gxp.copy()
    core = gxp[:, pad:-pad, pad:-pad].copy()
    core[:, 0, :] += gxp[:, :pad, pad:-pad].sum(axis=1)
    core[:, -1, :] += gxp[:, -pad:, pad:-pad].sum(axis=1)
    core[:, :, 0] += gxp[:, pad:-pad, :pad].sum(axis=2)
    core[:, :, -1] += gxp[:, pad:-pad, -pad:].sum(axis=2)
    core[:, 0, 0] += gxp[:, :pad, :pad].sum(axis=(1, 2))
    core[:, 0, -1] += gxp[:, :pad, -pad:].sum(axis=(1, 2))
    core[:, -1, 0] += gxp[:, -pad:, :pad].sum(axis=(1, 2))
    core[:, -1, -1] += gxp[:, -pad:, -pad:].sum(axis=(1, 2))
    return core


def conv2d_backward(grad_out: np.ndarray, layer: ConvLayer, x: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients of conv2d given the layer input x.

    Returns (g_kernel, g_bias, g_input); g_input is None when not
    requested. The weight gradient correlates the output gradient with
    the input windows; the input gradient is the correlation of the
    zero-extended output gradient with the flipped kernel (one matrix
    product each), followed by the replicate-padding adjoint.
    """
    c_in, h, w = x.shape
    k = layer.ksize
    pad = k // 2
    gmat = grad_out.reshape(layer.c_out, h * w)
    g_bias = gmat.sum(axis=1)
    cols = _im2col(x, k)
    g_kernel = (gmat @ cols.T).reshape(layer.kernel.shape)
    if not need_input_grad:
        return g_kernel, g_bias, None
    ext = k - 1
    gz = np.zeros((layer.c_out, h + 2 * ext, w + 2 * ext), dtype=grad_out.dtype)
    gz[:, ext:ext + h, ext:ext + w] = grad_out
    gcols = _window_rows(gz, k, h + 2 * pad, w + 2 * pad)
    kflip = layer.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    wmat = np.ascontiguousarray(kflip).reshape(c_in, layer.c_out * k * k)
    gxp = (wmat @ gcols).reshape(c_in, h + 2 * pad, w + 2 * pad)
    return g_kernel, g_bias, _fold_pad_adjoint(gxp, pad)


# ---------------------------------------------------------------------------
# Network forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTape:
    """Per-layer intermediates retained for backward."""

    inputs: list[np.ndarray] = field(default_factory=list)
    relu_mask: list[np.ndarray | None] = field(default_factory=list)
    n_layers: int = 0


def forward(net: Network, i_lr_up: np.ndarray, f_swapped: np.ndarray | None = None,
            want_tape: bool = False):
    """Run the network; returns (i_sr, tape). Output dims == input dims.

    f_swapped must be given exactly when the network has a concat point,
    with spatial dims equal to the input's.
    """
    img = np.asarray(i_lr_up)
    if img.ndim != 2:
        raise ShapeError(f"expected 2D input image, got {img.ndim}D")
    if (net.concat_after is not None) != (f_swapped is not None):
        raise ShapeError("swapped features required iff the network concatenates them")
    if f_swapped is not None:
        f_swapped = np.asarray(f_swapped, dtype=img.dtype)
        if f_swapped.shape != (net.concat_channels, *img.shape):
            raise ShapeError(
                f"swapped features {f_swapped.shape} do not match "
                f"({net.concat_channels}, {img.shape[0]}, {img.shape[1]})"
            )
    x = img[None]
    tape = ForwardTape(n_layers=len(net.layers)) if want_tape else None
    for idx, layer in enumerate(net.layers):
        if want_tape:
            tape.inputs.append(x)
        out = conv2d(x, layer)
        if layer.activation == ACT_RELU:
            mask = out > 0
            x = np.where(mask, out, 0)
        else:
            mask = None
            x = out
        if want_tape:
            tape.relu_mask.append(mask)
        if net.concat_after == idx:
            x = np.concatenate([x, f_swapped], axis=0)
    return x[0], tape


def backward(net: Network, tape: ForwardTape, grad_out: np.ndarray,
             need_input_grad: bool = False):
    """Exact gradients of forward wrt parameters and the input image.

    Returns (param_grads, grad_input): param_grads[i] = (g_kernel, g_bias)
    for layer i. The concat branch's gradient is discarded (the swapped
    features are constants). grad_input is None unless requested; in
    training the input is data, so its gradient is normally skipped.
    """
    if tape is None or tape.n_layers != len(net.layers):
        raise ShapeError("tape does not match network")
    g = np.asarray(grad_out)[None]
    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if net.concat_after == idx:
            g = g[:layer.c_out]
        if layer.activation == ACT_RELU:
            g = np.where(tape.relu_mask[idx], g, 0)
        gk, gb, g = conv2d_backward(g, layer, tape.inputs[idx],
                                    need_input_grad=(idx > 0 or need_input_grad))
        param_grads[idx] = (gk, gb)
    return param_grads, g[0] if g is not None else None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments, one (kernel, bias) pair per layer."""

    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: Network, lr: float = 1e-4, beta1: float = 0.9,
                    beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = lambda a: np.zeros_like(a)
        return cls(
            m=[(zeros(l.kernel), zeros(l.bias)) for l in net.layers],
            v=[(zeros(l.kernel), zeros(l.bias)) for l in net.layers],
            t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(net: Network, grads, state: AdamState):
    """One in-place Adam update; increments state.t. Returns (net, state)."""
    if len(grads) != len(net.layers):
        raise ShapeError("gradient list does not match network")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, layer in enumerate(net.layers):
        for j, (param, grad) in enumerate(((layer.kernel, grads[i][0]),
                                           (layer.bias, grads[i][1]))):
            if param.shape != grad.shape:
                raise ShapeError(f"grad shape mismatch at layer {i}")
            m = state.m[i][j]
            v = state.v[i][j]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * np.square(grad)
            param -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_tensor_blob(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_tensor_blob(fh) -> np.ndarray:
    head = fh.read(12)
    if len(head) < 12:
        raise TruncatedPayloadError("truncated payload: tensor block header")
    if head[:4] != TENSOR_MAGIC:
        raise MalformedHeaderError("malformed header: bad tensor block magic")
    version, ndim = struct.unpack_from("<II", head, 4)
    if version != TENSOR_VERSION:
        raise FormatVersionError(f"unsupported tensor version {version}")
    dims_raw = fh.read(4 * ndim)
    if len(dims_raw) < 4 * ndim:
        raise TruncatedPayloadError("truncated payload: tensor block dims")
    dims = struct.unpack(f"<{ndim}I", dims_raw)
    need = int(np.prod(dims, dtype=np.int64)) * 4 if ndim else 4
    data = fh.read(need)
    if len(data) < need:
        raise TruncatedPayloadError("truncated payload: tensor block data")
    return np.frombuffer(data, dtype="<f4").reshape(dims).copy()


def save_checkpoint(net: Network, state: AdamState, path) -> None:
    """Write network + optimizer state: JSON manifest then tensor blocks."""
    manifest = {
        "layers": [
            {"c_out": l.c_out, "c_in": l.c_in, "k": l.ksize,
             "activation": l.activation}
            for l in net.layers
        ],
        "concat_after": net.concat_after,
        "concat_channels": net.concat_channels,
        "adam": {"t": state.t, "lr": state.lr, "beta1": state.beta1,
                 "beta2": state.beta2, "eps": state.eps},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for layer in net.layers:
            _write_tensor_blob(fh, layer.kernel)
            _write_tensor_blob(fh, layer.bias)
        for pair in (state.m, state.v):
            for mk, mb in pair:
                _write_tensor_blob(fh, mk)
                _write_tensor_blob(fh, mb)


def load_checkpoint(path) -> tuple[Network, AdamState]:
    """Read a checkpoint; bit-exact inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != CHECKPOINT_MAGIC:
            raise MalformedHeaderError("malformed header: not a checkpoint file")
        version, mlen = struct.unpack_from("<II", head, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatVersionError(f"unsupported checkpoint version {version}")
        blob = fh.read(mlen)
        if len(blob) < mlen:
            raise TruncatedPayloadError("truncated payload: checkpoint manifest")
        manifest = json.loads(blob.decode("utf-8"))
        layers = []
        for lspec in manifest["layers"]:
            kernel = _read_tensor_blob(fh)
            bias = _read_tensor_blob(fh)
            expect = (lspec["c_out"], lspec["c_in"], lspec["k"], lspec["k"])
            if kernel.shape != expect or bias.shape != (lspec["c_out"],):
                raise ShapeError(
                    f"checkpoint tensor shape {kernel.shape} does not match "
                    f"declared architecture {expect}"
                )
            layers.append(ConvLayer(kernel=kernel, bias=bias,
                                    activation=lspec["activation"]))
        net = Network(layers=layers,
                      concat_after=manifest["concat_after"],
                      concat_channels=manifest.get("concat_channels", 0) or 0)
        adam = manifest["adam"]
        moments = []
        for _ in range(2):
            pairs = []
            for lspec, layer in zip(manifest["layers"], net.layers):
                mk = _read_tensor_blob(fh)
                mb = _read_tensor_blob(fh)
                if mk.shape != layer.kernel.shape or mb.shape != layer.bias.shape:
                    raise ShapeError("optimizer state does not match architecture")
                pairs.append((mk, mb))
            moments.append(pairs)
        state = AdamState(m=moments[0], v=moments[1], t=adam["t"], lr=adam["lr"],
                          beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"])
    return net, state
