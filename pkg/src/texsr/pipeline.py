"""End-to-end orchestration: dataset preparation, swap precomputation,
training, inference and evaluation, driven by a flat declarative config.

Every stage is deterministic given (config, seed, inputs): crops come
from a seeded generator, training reshuffles each epoch from its own
seeded generator, and all heavy math runs in fixed order. Low-resolution
inputs are always bicubic 1/factor downsamples of the high-resolution
data, and the network consumes the bicubic re-upsampled carrier
(upsample-first convention), so the declared degradation fully describes
the training distribution.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, ShapeError, UsageError
from .image_core import (
    bicubic_resize,
    degrade,
    load_image,
    load_tensor,
    save_image,
    save_tensor,
)
from .losses import LossConfig, LossWeights, PerceptualExtractor, loss_total
from .metrics import PairedScores, psnr, ssim, wilcoxon_signed_rank
from .model import AdamState, adam_step, backward, forward, init_srcnn, load_checkpoint, save_checkpoint
from .scattering import ScatterConfig
from .texture_transfer import build_reference_pool, swap_with_pool

logger = logging.getLogger("texsr")

INDEX_NAME = "index.tsv"
SWAP_INDEX_NAME = "swaps.tsv"
CHECKPOINT_NAME = "checkpoint.stck"
MANIFEST_NAME = "manifest.json"
IMAGE_SUFFIXES = (".pgm", ".sttf")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Flat run configuration; field names double as config-file keys."""

    sr_factor: int = 4
    patch_size: int = 64
    crops_per_slice: int = 20
    batch_size: int = 9
    lr: float = 1e-4
    steps: int = 2000
    seed: int = 0
    scatter_j: int = 2
    scatter_l: int = 8
    w_rec: float = 1.0
    w_p: float = 0.05
    w_t: float = 0.01
    reference_paths: str = ""          # comma-separated; empty = no-TT baseline
    degradation: str = "bicubic"
    eval_interval: int = 200
    extractor: str = "scattering"      # or "fixed-random-conv"
    similarity_normalized: bool = True
    gram_normalize: bool = True

    def __post_init__(self):
        if self.sr_factor < 2:
            raise UsageError("sr_factor must be >= 2")
        if self.patch_size % self.sr_factor:
            raise UsageError("patch_size must be divisible by sr_factor")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.degradation != "bicubic":
            raise UsageError(f"unknown degradation {self.degradation!r}")
        if self.extractor not in ("scattering", "fixed-random-conv"):
            raise UsageError(f"unknown extractor {self.extractor!r}")

    @property
    def references(self) -> list[str]:
        return [p.strip() for p in self.reference_paths.split(",") if p.strip()]

    def scatter_config(self) -> ScatterConfig:
        return ScatterConfig(J=self.scatter_j, L=self.scatter_l)

    def loss_weights(self) -> LossWeights:
        return LossWeights(w_rec=self.w_rec, w_p=self.w_p, w_t=self.w_t)

    def make_extractor(self) -> PerceptualExtractor:
        if self.extractor == "scattering":
            return PerceptualExtractor.scattering_features(self.scatter_config())
        return PerceptualExtractor.random_conv(seed=0)

    def loss_config(self) -> LossConfig:
        return LossConfig(weights=self.loss_weights(),
                          scatter=self.scatter_config(),
                          extractor=self.make_extractor(),
                          gram_normalize=self.gram_normalize)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {name}: expected boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {name}: expected {kind.__name__}, got {raw!r}")


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Build a TrainConfig from an optional key=value file plus overrides."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    kinds = {"int": int, "float": float, "str": str, "bool": bool}
    values: dict = {}

    def apply(name: str, raw: str):
        name = name.strip()
        if name not in types:
            raise UsageError(f"unknown config key {name!r}")
        values[name] = _coerce(name, kinds[types[name]], raw)

    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, raw = line.split("=", 1)
            apply(key, raw)
    for key, raw in (overrides or {}).items():
        apply(key, raw)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

def _source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


@dataclass
class RunManifest:
    """Append-only record of one run, sufficient to re-execute it."""

    config: dict
    revision: str = field(default_factory=_source_revision)
    step_losses: list = field(default_factory=list)
    eval_records: list = field(default_factory=list)
    wall_clock_sec: float = 0.0
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------

def _list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    out = sorted(p for p in directory.iterdir()
                 if p.suffix.lower() in IMAGE_SUFFIXES)
    return out


def prepare_dataset(hr_dir, out_dir, cfg: TrainConfig) -> int:
    """Crop seeded random HR patches and write (HR, LR) training pairs.

    Emits 16-bit PGM pairs plus an index file; returns the pair count.
    Slices smaller than the patch size are skipped with a warning.
    """
    paths = _list_images(hr_dir)
    if not paths:
        raise DataError(f"no images found in {hr_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    ps = cfg.patch_size
    rows = []
    for path in paths:
        img = load_image(path)
        h, w = img.shape
        if h < ps or w < ps:
            logger.warning("skipping %s: %dx%d smaller than patch size %d",
                           path.name, h, w, ps)
            continue
        for k in range(cfg.crops_per_slice):
            r = int(rng.integers(0, h - ps + 1))
            c = int(rng.integers(0, w - ps + 1))
            patch = img[r:r + ps, c:c + ps]
            lr = degrade(patch, cfg.sr_factor)[0]
            pid = f"p{len(rows):05d}"
            hr_name = f"{pid}_hr.pgm"
            lr_name = f"{pid}_lr.pgm"
            save_image(patch, out_dir / hr_name, bit_depth=16)
            save_image(lr, out_dir / lr_name, bit_depth=16)
            rows.append((pid, hr_name, lr_name, path.name, r, c))
    if not rows:
        raise DataError("no slice was large enough to crop from")
    with open(out_dir / INDEX_NAME, "w") as fh:
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")
    return len(rows)


def _read_index(dataset_dir) -> list[dict]:
    index = Path(dataset_dir) / INDEX_NAME
    if not index.is_file():
        raise DataError(f"missing dataset index {index}")
    rows = []
    for line in index.read_text().splitlines():
        parts = line.split("\t")
        if len(parts) < 3:
            raise DataError(f"bad index line: {line!r}")
        rows.append({"id": parts[0], "hr": parts[1], "lr": parts[2]})
    if not rows:
        raise DataError(f"empty dataset index {index}")
    return rows


# ---------------------------------------------------------------------------
# Swap precomputation
# ---------------------------------------------------------------------------

def precompute_swaps(dataset_dir, out_dir, cfg: TrainConfig,
                     reference_paths: list[str] | None = None) -> int:
    """Compute and archive the swapped feature map of every LR patch."""
    refs = cfg.references if reference_paths is None else list(reference_paths)
    if not refs:
        raise UsageError("texture transfer requires >= 1 reference image")
    for p in refs:
        if not Path(p).is_file():
            raise DataError(f"missing reference image {p}")
    rows = _read_index(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = build_reference_pool([load_image(p) for p in refs],
                                cfg.scatter_config(), cfg.sr_factor)
    dataset_dir = Path(dataset_dir)
    index_rows = []
    for row in rows:
        lr = load_image(dataset_dir / row["lr"])
        lr_up = bicubic_resize(lr, cfg.sr_factor)
        swapped, match = swap_with_pool(
            lr_up, pool, normalized=cfg.similarity_normalized, return_match=True)
        name = f"{row['id']}.sttf"
        save_tensor(swapped, out_dir / name)
        index_rows.append((row["id"], name, float(np.mean(match.scores))))
    with open(out_dir / SWAP_INDEX_NAME, "w") as fh:
        for rid, name, score in index_rows:
            fh.write(f"{rid}\t{name}\t{score!r}\n")
    return len(index_rows)


def read_swap_scores(swaps_dir) -> dict[str, float]:
    """Patch id -> mean match score, from the swap archive index."""
    index = Path(swaps_dir) / SWAP_INDEX_NAME
    if not index.is_file():
        raise DataError(f"missing swap index {index}")
    out = {}
    for line in index.read_text().splitlines():
        rid, _, score = line.split("\t")
        out[rid] = float(score)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _load_pairs(dataset_dir, cfg: TrainConfig):
    dataset_dir = Path(dataset_dir)
    pairs = []
    for row in _read_index(dataset_dir):
        hr = load_image(dataset_dir / row["hr"])
        lr = load_image(dataset_dir / row["lr"])
        lr_up = bicubic_resize(lr, cfg.sr_factor)
        if lr_up.shape != hr.shape:
            raise ShapeError(
                f"pair {row['id']}: upsampled LR {lr_up.shape} != HR {hr.shape}"
            )
        pairs.append({
            "id": row["id"],
            "hr": hr,
            "lr_up32": lr_up.astype(np.float32),
        })
    return pairs


def train(cfg: TrainConfig, dataset_dir, swaps_dir=None, out_dir="run"):
    """Train the SR network; returns (checkpoint_path, manifest_path).

    Texture transfer is on exactly when a swap archive is given: the
    network then concatenates the archived features and the texture loss
    weight applies. Without an archive the baseline uses only the
    reconstruction and perceptual terms.
    """
    t_start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = _load_pairs(dataset_dir, cfg)
    use_tt = swaps_dir is not None
    if cfg.w_t > 0 and not use_tt:
        raise UsageError("w_t > 0 requires a swap archive (or set w_t=0)")
    weights = cfg.loss_weights()
    swapped = {}
    if use_tt:
        swaps_dir = Path(swaps_dir)
        expect_c = cfg.scatter_config().channel_count
        for pair in pairs:
            path = swaps_dir / f"{pair['id']}.sttf"
            if not path.is_file():
                raise DataError(f"missing swapped features {path}")
            f32 = load_tensor(path)
            if f32.shape != (expect_c, *pair["hr"].shape):
                raise ShapeError(f"swap archive {path} has shape {f32.shape}")
            swapped[pair["id"]] = f32

    net = init_srcnn(
        concat_channels=cfg.scatter_config().channel_count if use_tt else None,
        seed=cfg.seed)
    state = AdamState.for_network(net, lr=cfg.lr)
    loss_cfg = LossConfig(weights=weights, scatter=cfg.scatter_config(),
                          extractor=cfg.make_extractor(),
                          gram_normalize=cfg.gram_normalize)
    hr_feats = {}
    if cfg.w_p > 0:
        # perceptual target features are constant across the run
        for pair in pairs:
            hr_feats[pair["id"]] = loss_cfg.extractor.features(pair["hr"])
    manifest = RunManifest(config=asdict(cfg),
                           extra={"dataset": str(dataset_dir),
                                  "swaps": str(swaps_dir) if use_tt else None,
                                  "pairs": len(pairs)})
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    for step in range(1, cfg.steps + 1):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(pairs)))
            batch.append(order.pop(0))
        grads_sum = None
        loss_sum = 0.0
        for idx in batch:
            pair = pairs[idx]
            f32 = swapped.get(pair["id"]) if use_tt else None
            i_sr, tape = forward(net, pair["lr_up32"], f32, want_tape=True)
            value, grad = loss_total(i_sr, pair["hr"], f32, loss_cfg,
                                     hr_features=hr_feats.get(pair["id"]))
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}")
            loss_sum += value
            pgrads, _ = backward(net, tape, grad.astype(np.float32))
            if grads_sum is None:
                grads_sum = pgrads
            else:
                grads_sum = [(gk + pk, gb + pb) for (gk, gb), (pk, pb)
                             in zip(grads_sum, pgrads)]
        scale = np.float32(1.0 / len(batch))
        grads_mean = [(gk * scale, gb * scale) for gk, gb in grads_sum]
        adam_step(net, grads_mean, state)
        mean_loss = loss_sum / len(batch)
        manifest.step_losses.append(mean_loss)
        if cfg.eval_interval > 0 and (step % cfg.eval_interval == 0
                                      or step == cfg.steps):
            record = _validation_record(net, pairs, swapped, use_tt, step)
            manifest.eval_records.append(record)
            logger.info("step %d  loss %.5f  val psnr %.2f dB",
                        step, mean_loss, record["psnr"])
    ckpt_path = out_dir / CHECKPOINT_NAME
    save_checkpoint(net, state, ckpt_path)
    manifest.wall_clock_sec = time.perf_counter() - t_start
    manifest_path = out_dir / MANIFEST_NAME
    manifest.save(manifest_path)
    return ckpt_path, manifest_path


def _validation_record(net, pairs, swapped, use_tt, step, max_pairs=4):
    vals_psnr = []
    vals_ssim = []
    for pair in pairs[:max_pairs]:
        f32 = swapped.get(pair["id"]) if use_tt else None
        i_sr, _ = forward(net, pair["lr_up32"], f32)
        sr = np.clip(i_sr.astype(np.float64), 0.0, 1.0)
        vals_psnr.append(psnr(sr, pair["hr"]))
        vals_ssim.append(ssim(sr, pair["hr"]))
    return {"step": step,
            "psnr": float(np.mean(vals_psnr)),
            "ssim": float(np.mean(vals_ssim))}


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer(checkpoint_path, lr_image, cfg: TrainConfig,
          reference_paths: list[str] | None = None) -> np.ndarray:
    """Super-resolve one LR image with a trained checkpoint.

    lr_image may be a path or an array. Texture-transfer checkpoints
    need reference images (from the argument or cfg.reference_paths).
    """
    net, _ = load_checkpoint(checkpoint_path)
    use_tt = net.concat_after is not None
    refs = cfg.references if reference_paths is None else list(reference_paths)
    if use_tt and not refs:
        raise UsageError(
            "mode mismatch: texture-transfer checkpoint without references")
    if not use_tt and refs:
        logger.info("checkpoint has no concat point; references ignored")
    lr = load_image(lr_image) if not isinstance(lr_image, np.ndarray) else lr_image
    lr_up = bicubic_resize(lr, cfg.sr_factor)
    f32 = None
    if use_tt:
        pool = build_reference_pool([load_image(p) for p in refs],
                                    cfg.scatter_config(), cfg.sr_factor)
        swapped = swap_with_pool(lr_up, pool,
                                 normalized=cfg.similarity_normalized)
        if swapped.shape[0] != net.concat_channels:
            raise ShapeError(
                f"checkpoint expects {net.concat_channels} swapped channels, "
                f"got {swapped.shape[0]}"
            )
        f32 = swapped.astype(np.float32)
    i_sr, _ = forward(net, lr_up.astype(np.float32), f32)
    return i_sr.astype(np.float64)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _method_runner(method, cfg: TrainConfig):
    """Returns sr = f(lr) for a method name: 'bicubic' or a checkpoint path."""
    if method == "bicubic":
        return lambda lr: bicubic_resize(lr, cfg.sr_factor)
    path = Path(method)
    if not path.is_file():
        raise DataError(f"method {method!r} is neither 'bicubic' nor a checkpoint")
    return lambda lr: infer(path, lr, cfg)


def evaluate(method_a, method_b, test_dir, cfg: TrainConfig, out_csv=None):
    """Per-image PSNR/SSIM of two methods plus paired significance tests.

    Test images are HR ground truth; LR inputs are bicubic 1/factor
    downsamples (images are center-independent top-left cropped to
    divisible dims if needed). Returns (rows, verdict dict).
    """
    paths = _list_images(test_dir)
    if not paths:
        raise DataError(f"no test images in {test_dir}")
    run_a = _method_runner(method_a, cfg)
    run_b = _method_runner(method_b, cfg)
    f = cfg.sr_factor
    rows = []
    for path in paths:
        hr = load_image(path)
        h, w = (dim - dim % f for dim in hr.shape)
        if (h, w) != hr.shape:
            logger.warning("cropping %s to %dx%d for divisibility", path.name, h, w)
            hr = hr[:h, :w]
        lr = bicubic_resize(hr, 1.0 / f)
        outs = {}
        for tag, runner in (("a", run_a), ("b", run_b)):
            sr = np.clip(runner(lr), 0.0, 1.0)
            if sr.shape != hr.shape:
                raise ShapeError(f"method {tag} produced {sr.shape}, HR is {hr.shape}")
            outs[f"psnr_{tag}"] = psnr(sr, hr)
            outs[f"ssim_{tag}"] = ssim(sr, hr)
        rows.append({"image_id": path.stem, **outs})
    if out_csv is not None:
        write_scores_csv(rows, out_csv)
    return rows, compare_scores(rows)


def write_scores_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "psnr_a", "psnr_b", "ssim_a", "ssim_b"])
        for row in rows:
            writer.writerow([row["image_id"], repr(row["psnr_a"]),
                             repr(row["psnr_b"]), repr(row["ssim_a"]),
                             repr(row["ssim_b"])])


def read_scores_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"image_id", "psnr_a", "psnr_b", "ssim_a", "ssim_b"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise DataError(f"CSV {path} lacks columns {sorted(need)}")
        for rec in reader:
            rows.append({"image_id": rec["image_id"],
                         **{k: float(rec[k]) for k in need - {"image_id"}}})
    if not rows:
        raise DataError(f"empty score CSV {path}")
    return rows


def compare_scores(rows: list[dict]) -> dict:
    """Wilcoxon verdicts on the paired PSNR and SSIM columns."""
    verdict = {}
    for metric in ("psnr", "ssim"):
        a = np.array([row[f"{metric}_a"] for row in rows])
        b = np.array([row[f"{metric}_b"] for row in rows])
        res = wilcoxon_signed_rank(PairedScores(a=a, b=b))
        finite = np.isfinite(a) & np.isfinite(b)
        mean_a = float(np.mean(a[finite])) if finite.any() else math.inf
        mean_b = float(np.mean(b[finite])) if finite.any() else math.inf
        if res.method == "no-decision" or not res.significant_at_0_05:
            winner = "none"
        else:
            winner = "a" if mean_a > mean_b else "b"
        verdict[metric] = {
            "mean_a": mean_a,
            "mean_b": mean_b,
            "statistic": res.statistic,
            "p_two_sided": res.p_two_sided,
            "significant_at_0.05": res.significant_at_0_05,
            "n_used": res.n_used,
            "method": res.method,
            "winner": winner,
        }
    return verdict


def render_verdict(verdict: dict) -> str:
    lines = []
    for metric, rec in verdict.items():
        parts = [f"{metric}.{key}={rec[key]}" for key in
                 ("mean_a", "mean_b", "statistic", "p_two_sided",
                  "significant_at_0.05", "n_used", "method", "winner")]
        lines.append(" ".join(parts))
    return "\n".join(lines)
