"""Image representation, file I/O, bicubic resampling and patch handling.

Images are plain 2D float arrays (rows x cols) with nominal range [0, 1].
Feature maps are 3D float arrays (channels x rows x cols). Two on-disk
formats are supported:

* binary PGM ("P5"), 8-bit or 16-bit, 16-bit samples big-endian;
* the project tensor container: magic ``STTF``, little-endian u32
  version (=1), u32 ndim, u32 dims[ndim], float32 little-endian
  row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    FormatVersionError,
    MalformedHeaderError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedBitDepthError,
)

TENSOR_MAGIC = b"STTF"
TENSOR_VERSION = 1


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

def _read_pgm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments.

    Returns the tokens and the offset of the first payload byte (one
    whitespace character past the last token).
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(blob)
    while len(tokens) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise MalformedHeaderError("malformed header: truncated token list")
        tokens.append(blob[start:pos])
    if pos >= n or not blob[pos : pos + 1].isspace():
        raise MalformedHeaderError("malformed header: missing payload separator")
    return tokens, pos + 1


def load_image(path) -> np.ndarray:
    """Load a grayscale image from PGM or the project tensor format.

    Sample values are scaled to [0, 1] by the format's maxval. Tensor
    files must hold a 2D array and are returned as-is (already real).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == TENSOR_MAGIC:
        arr = _decode_tensor(blob)
        if arr.ndim != 2:
            raise ShapeError(f"expected 2D image tensor, got {arr.ndim}D")
        if not np.isfinite(arr).all():
            raise DataError(f"image tensor {path} holds non-finite values")
        return arr.astype(np.float64)
    if blob[:2] != b"P5":
        raise MalformedHeaderError("malformed header: not a binary PGM or STTF file")
    try:
        tokens, payload_at = _read_pgm_tokens(blob[2:], 3)
    except MalformedHeaderError:
        raise
    payload_at += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise MalformedHeaderError(f"malformed header: non-numeric field ({exc})")
    if width <= 0 or height <= 0:
        raise MalformedHeaderError("malformed header: non-positive dimensions")
    if maxval <= 0 or maxval > 65535:
        raise UnsupportedBitDepthError(f"unsupported bit depth: maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = height * width * dtype.itemsize
    payload = blob[payload_at : payload_at + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"truncated payload: need {need} bytes, have {len(payload)}"
        )
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return raw.astype(np.float64) / float(maxval)


def save_image(img: np.ndarray, path, bit_depth: int = 8) -> None:
    """Write an image as binary PGM, clamping to [0, 1] then rounding half up."""
    if bit_depth == 8:
        maxval, dtype = 255, np.dtype("u1")
    elif bit_depth == 16:
        maxval, dtype = 65535, np.dtype(">u2")
    else:
        raise UnsupportedBitDepthError(f"unsupported bit depth: {bit_depth}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected 2D image, got {img.ndim}D")
    q = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5).astype(dtype)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.tobytes())


# ---------------------------------------------------------------------------
# Project tensor format
# ---------------------------------------------------------------------------

def _decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != TENSOR_MAGIC:
        raise MalformedHeaderError("malformed header: bad tensor magic")
    if len(blob) < 12:
        raise TruncatedPayloadError("truncated payload: tensor header incomplete")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != TENSOR_VERSION:
        raise FormatVersionError(f"unsupported tensor version {version}")
    if ndim > 8:
        raise MalformedHeaderError(f"malformed header: implausible ndim {ndim}")
    if len(blob) < 12 + 4 * ndim:
        raise TruncatedPayloadError("truncated payload: tensor dims incomplete")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    off = 12 + 4 * ndim
    need = count * 4
    if len(blob) < off + need:
        raise TruncatedPayloadError(
            f"truncated payload: need {need} data bytes, have {len(blob) - off}"
        )
    data = np.frombuffer(blob[off : off + need], dtype="<f4")
    return data.reshape(dims).copy()


def load_tensor(path) -> np.ndarray:
    """Load a float32 array from the project tensor container."""
    with open(path, "rb") as fh:
        return _decode_tensor(fh.read())


def save_tensor(arr: np.ndarray, path) -> None:
    """Write an array in the project tensor container (cast to float32)."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# Bicubic resampling
# ---------------------------------------------------------------------------

def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic (Keys kernel, a = -0.5), support [-2, 2]."""
    a = -0.5
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resize_axis(arr: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = arr.shape[axis]
    if out_len == in_len:
        return arr
    # Top-left aligned sample mapping: output i reads input at i*in/out.
    # Integer-factor resampling then hits exact kernel phases, so border
    # clamping cannot leak further than 2 output pixels inward.
    x = np.arange(out_len) * (in_len / out_len)
    base = np.floor(x).astype(np.int64)
    taps = base[:, None] + np.arange(-1, 3)[None, :]
    weights = _cubic_kernel(x[:, None] - taps)
    taps = np.clip(taps, 0, in_len - 1)
    moved = np.moveaxis(arr, axis, 0)
    gathered = moved[taps]  # (out_len, 4, ...)
    out = np.einsum("ok,ok...->o...", weights, gathered)
    return np.moveaxis(out, 0, axis)


def bicubic_resize(img: np.ndarray, scale) -> np.ndarray:
    """Separable Catmull-Rom resampling by `scale` with replicate borders.

    Output dims are round(input dims * scale) and must stay >= 1. The
    kernel partitions unity, so constants are preserved exactly and
    scale 1 is the identity.
    """
    scale = float(scale)
    if scale <= 0:
        raise ShapeError(f"scale must be positive, got {scale}")
    img = np.asarray(img, dtype=np.float64)
    out_h = int(np.floor(img.shape[0] * scale + 0.5))
    out_w = int(np.floor(img.shape[1] * scale + 0.5))
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output dims {out_h}x{out_w} collapse to zero")
    out = _resize_axis(img, out_h, 0)
    return _resize_axis(out, out_w, 1)


def degrade(img_hr: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """Bicubic down-up degradation: returns (lr, lr_up).

    lr is the 1/factor downsample, lr_up its re-upsample back to the
    input dims (the blurred carrier used for matching).
    """
    factor = int(factor)
    if factor < 2:
        raise ShapeError(f"degradation factor must be >= 2, got {factor}")
    h, w = img_hr.shape
    if h % factor or w % factor:
        raise ShapeError(f"dims {h}x{w} not divisible by factor {factor}")
    lr = bicubic_resize(img_hr, 1.0 / factor)
    lr_up = bicubic_resize(lr, float(factor))
    return lr, lr_up


# ---------------------------------------------------------------------------
# Patch extraction / assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    """Dense patch lattice over a feature map's spatial dims."""

    patch_size: int
    stride: int
    origin_rows: int
    origin_cols: int

    @classmethod
    def for_shape(cls, height: int, width: int, patch_size: int = 3,
                  stride: int = 1) -> "PatchGrid":
        if patch_size < 1 or stride < 1:
            raise ShapeError("patch_size and stride must be >= 1")
        if height < patch_size or width < patch_size:
            raise ShapeError(
                f"patch {patch_size} does not fit in {height}x{width}"
            )
        return cls(
            patch_size=patch_size,
            stride=stride,
            origin_rows=(height - patch_size) // stride + 1,
            origin_cols=(width - patch_size) // stride + 1,
        )

    @property
    def patch_count(self) -> int:
        return self.origin_rows * self.origin_cols


def extract_patches(fm: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Extract dense patches row-major by origin; result (N, C, k, k)."""
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ShapeError(f"expected C x H x W feature map, got {fm.ndim}D")
    c, h, w = fm.shape
    k, s = grid.patch_size, grid.stride
    if h < k or w < k:
        raise ShapeError(f"patch {k} larger than feature map {h}x{w}")
    windows = np.lib.stride_tricks.sliding_window_view(fm, (k, k), axis=(1, 2))
    windows = windows[:, ::s, ::s]
    if windows.shape[1] != grid.origin_rows or windows.shape[2] != grid.origin_cols:
        raise ShapeError("grid does not match feature map dims")
    # (C, R, Q, k, k) -> (R*Q, C, k, k)
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(
        grid.patch_count, c, k, k
    )


def assemble_patches(patches: np.ndarray, grid: PatchGrid,
                     dims: tuple[int, int, int]) -> np.ndarray:
    """Overlap-average patches back onto a C x H x W map.

    Each output element is the mean of every patch value that covers it.
    The mean is computed as base + sum(deviation)/count against the first
    covering patch, so identical overlaps reproduce their value exactly
    and assemble(extract(fm)) == fm bit for bit.
    """
    patches = np.asarray(patches)
    c, h, w = dims
    k, s = grid.patch_size, grid.stride
    if patches.shape != (grid.patch_count, c, k, k):
        raise ShapeError(
            f"patch stack {patches.shape} does not match grid/dims"
        )
    dtype = np.result_type(patches, np.float64)
    stack = patches.reshape(grid.origin_rows, grid.origin_cols, c, k, k)
    rows = np.arange(grid.origin_rows) * s
    cols = np.arange(grid.origin_cols) * s
    rsel = rows[:, None]
    csel = cols[None, :]

    # Ascending (dr, dc) overwrites leave each pixel holding the value from
    # its first covering patch in row-major origin order.
    base = np.zeros((c, h, w), dtype=dtype)
    cover = np.zeros((h, w), dtype=np.int64)
    for dr in range(k):
        for dc in range(k):
            base[:, rsel + dr, csel + dc] = stack[:, :, :, dr, dc].transpose(2, 0, 1)
            cover[rsel + dr, csel + dc] += 1

    dev = np.zeros((c, h, w), dtype=dtype)
    for dr in range(k):
        for dc in range(k):
            vals = stack[:, :, :, dr, dc].transpose(2, 0, 1)
            dev[:, rsel + dr, csel + dc] += vals - base[:, rsel + dr, csel + dc]
    covered = cover > 0
    dev[:, covered] /= cover[covered]
    return base + dev
