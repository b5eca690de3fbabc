import json

import numpy as np
import pytest

from texsr.errors import DataError, ShapeError, UsageError
from texsr.image_core import (
    bicubic_resize,
    load_image,
    load_tensor,
    save_image,
    save_tensor,
)
from texsr.model import AdamState, ConvLayer, Network, forward, init_srcnn, load_checkpoint, save_checkpoint
from texsr.pipeline import (
    TrainConfig,
    compare_scores,
    evaluate,
    infer,
    load_config,
    precompute_swaps,
    prepare_dataset,
    read_scores_csv,
    read_swap_scores,
    render_verdict,
    train,
    write_scores_csv,
)
from texsr.metrics import psnr

from synth import make_family_dir, striped_image

FAST = dict(patch_size=32, crops_per_slice=3, batch_size=2, steps=12,
            eval_interval=6, scatter_j=2, scatter_l=4,
            extractor="fixed-random-conv", seed=7)


@pytest.fixture(scope="module")
def slices_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("slices")
    make_family_dir(path, 3, seed=10, size=64)
    return path


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, slices_dir):
    out = tmp_path_factory.mktemp("dataset")
    cfg = TrainConfig(**FAST)
    n = prepare_dataset(slices_dir, out, cfg)
    assert n == 9
    return out


class TestConfig:
    def test_defaults_match_protocol(self):
        cfg = TrainConfig()
        assert cfg.sr_factor == 4
        assert cfg.patch_size == 64
        assert cfg.crops_per_slice == 20
        assert cfg.batch_size == 9
        assert cfg.lr == 1e-4
        assert cfg.scatter_j == 2 and cfg.scatter_l == 8

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("steps = 50\nw_t = 0.5  # texture weight\n\n# comment\n")
        cfg = load_config(p, {"steps": "75", "extractor": "fixed-random-conv"})
        assert cfg.steps == 75
        assert cfg.w_t == 0.5
        assert cfg.extractor == "fixed-random-conv"

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("no_such_key = 3\n")
        with pytest.raises(UsageError):
            load_config(p)

    def test_bad_value_rejected(self):
        with pytest.raises(UsageError):
            load_config(None, {"steps": "many"})

    def test_divisibility_enforced(self):
        with pytest.raises(UsageError):
            TrainConfig(patch_size=30, sr_factor=4)

    def test_reference_list_parsing(self):
        cfg = TrainConfig(reference_paths="a.pgm, b.pgm,")
        assert cfg.references == ["a.pgm", "b.pgm"]


class TestPrepare:
    def test_pair_count_and_dims(self, dataset_dir):
        cfg = TrainConfig(**FAST)
        index = (dataset_dir / "index.tsv").read_text().splitlines()
        assert len(index) == 9
        first = index[0].split("\t")
        hr = load_image(dataset_dir / first[1])
        lr = load_image(dataset_dir / first[2])
        assert hr.shape == (32, 32)
        assert lr.shape == (8, 8)

    def test_same_seed_reproduces(self, slices_dir, tmp_path):
        cfg = TrainConfig(**FAST)
        a = tmp_path / "a"
        b = tmp_path / "b"
        prepare_dataset(slices_dir, a, cfg)
        prepare_dataset(slices_dir, b, cfg)
        assert (a / "index.tsv").read_text() == (b / "index.tsv").read_text()
        for line in (a / "index.tsv").read_text().splitlines():
            name = line.split("\t")[1]
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_degenerate_geometry_single_origin(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        rng = np.random.default_rng(0)
        save_image(rng.random((32, 32)), src / "only.pgm", bit_depth=16)
        cfg = TrainConfig(**FAST)
        out = tmp_path / "out"
        prepare_dataset(src, out, cfg)
        rows = [l.split("\t") for l in (out / "index.tsv").read_text().splitlines()]
        assert all(r[4] == "0" and r[5] == "0" for r in rows)

    def test_small_slices_skipped(self, tmp_path, caplog):
        src = tmp_path / "src"
        src.mkdir()
        save_image(np.zeros((16, 16)), src / "tiny.pgm")
        save_image(np.random.default_rng(1).random((32, 32)),
                   src / "ok.pgm", bit_depth=16)
        out = tmp_path / "out"
        n = prepare_dataset(src, out, TrainConfig(**FAST))
        assert n == 3

    def test_empty_dir_rejected(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        with pytest.raises(DataError):
            prepare_dataset(src, tmp_path / "out", TrainConfig(**FAST))


class TestSwaps:
    def test_requires_reference(self, dataset_dir, tmp_path):
        with pytest.raises(UsageError):
            precompute_swaps(dataset_dir, tmp_path / "swaps", TrainConfig(**FAST))

    def test_archive_roundtrip_and_scores(self, dataset_dir, tmp_path, slices_dir):
        ref = sorted(slices_dir.iterdir())[0]
        cfg = TrainConfig(**FAST, reference_paths=str(ref))
        swaps = tmp_path / "swaps"
        n = precompute_swaps(dataset_dir, swaps, cfg)
        assert n == 9
        scores = read_swap_scores(swaps)
        assert len(scores) == 9
        assert all(-1.0 <= s <= 1.0 for s in scores.values())

        # recompute one swap in memory; the stored float32 must match exactly
        from texsr.texture_transfer import build_reference_pool, swap_with_pool
        row = (dataset_dir / "index.tsv").read_text().splitlines()[0].split("\t")
        lr = load_image(dataset_dir / row[2])
        pool = build_reference_pool([load_image(ref)], cfg.scatter_config(),
                                    cfg.sr_factor)
        swapped = swap_with_pool(bicubic_resize(lr, cfg.sr_factor), pool)
        stored = load_tensor(swaps / f"{row[0]}.sttf")
        np.testing.assert_array_equal(stored, swapped.astype(np.float32))

    def test_own_hr_reference_scores_highest(self, tmp_path):
        # dataset of 2 slices; the reference IS slice 0, so patches cropped
        # from slice 0 must match better on average than slice 1 patches
        src = tmp_path / "src"
        src.mkdir()
        rng = np.random.default_rng(5)
        img0 = striped_image(rng, size=32)
        img1 = np.clip(0.5 + 0.3 * rng.standard_normal((32, 32)), 0, 1)
        save_image(img0, src / "a_family.pgm", bit_depth=16)
        save_image(img1, src / "b_noise.pgm", bit_depth=16)
        cfg = TrainConfig(patch_size=32, crops_per_slice=2, scatter_j=2,
                          scatter_l=4, seed=3,
                          reference_paths=str(src / "a_family.pgm"))
        data = tmp_path / "data"
        prepare_dataset(src, data, cfg)
        swaps = tmp_path / "swaps"
        precompute_swaps(data, swaps, cfg)
        scores = read_swap_scores(swaps)
        family = [scores["p00000"], scores["p00001"]]
        noise = [scores["p00002"], scores["p00003"]]
        assert np.mean(family) > np.mean(noise)
        assert max(scores.values()) in family

    def test_missing_reference_file(self, dataset_dir, tmp_path):
        cfg = TrainConfig(**FAST, reference_paths="/nonexistent/ref.pgm")
        with pytest.raises(DataError):
            precompute_swaps(dataset_dir, tmp_path / "swaps", cfg)


class TestTrain:
    def test_zero_steps_checkpoint_is_initialization(self, dataset_dir, tmp_path):
        cfg = TrainConfig(**{**FAST, "steps": 0, "w_t": 0.0})
        ckpt, _ = train(cfg, dataset_dir, None, tmp_path / "run")
        net, state = load_checkpoint(ckpt)
        ref = init_srcnn(concat_channels=None, seed=cfg.seed)
        for got, want in zip(net.layers, ref.layers):
            np.testing.assert_array_equal(got.kernel, want.kernel)
            np.testing.assert_array_equal(got.bias, want.bias)
        assert state.t == 0

    def test_seeded_reruns_bit_identical(self, dataset_dir, tmp_path):
        cfg = TrainConfig(**{**FAST, "w_t": 0.0})
        c1, _ = train(cfg, dataset_dir, None, tmp_path / "r1")
        c2, _ = train(cfg, dataset_dir, None, tmp_path / "r2")
        assert c1.read_bytes() == c2.read_bytes()

    def test_loss_decreases_on_overfit(self, dataset_dir, tmp_path):
        cfg = TrainConfig(**{**FAST, "steps": 120, "lr": 1e-3, "w_t": 0.0,
                             "w_p": 0.0})
        _, manifest_path = train(cfg, dataset_dir, None, tmp_path / "run")
        manifest = json.loads(manifest_path.read_text())
        losses = manifest["step_losses"]
        assert len(losses) == 120
        assert np.mean(losses[-10:]) < 0.7 * np.mean(losses[:10])
        assert manifest["eval_records"][-1]["step"] == 120
        assert manifest["config"]["steps"] == 120
        assert manifest["wall_clock_sec"] > 0

    def test_texture_weight_requires_swaps(self, dataset_dir, tmp_path):
        cfg = TrainConfig(**FAST)  # default w_t = 0.01
        with pytest.raises(UsageError):
            train(cfg, dataset_dir, None, tmp_path / "run")

    def test_tt_training_runs_and_differs(self, dataset_dir, tmp_path, slices_dir):
        ref = sorted(slices_dir.iterdir())[0]
        cfg_base = TrainConfig(**{**FAST, "w_t": 0.0})
        cfg_tt = TrainConfig(**FAST, reference_paths=str(ref))
        swaps = tmp_path / "swaps"
        precompute_swaps(dataset_dir, swaps, cfg_tt)
        ck_base, _ = train(cfg_base, dataset_dir, None, tmp_path / "base")
        ck_tt, _ = train(cfg_tt, dataset_dir, swaps, tmp_path / "tt")
        net_tt, _ = load_checkpoint(ck_tt)
        assert net_tt.concat_after == 0
        assert net_tt.concat_channels == cfg_tt.scatter_config().channel_count
        net_base, _ = load_checkpoint(ck_base)
        assert net_base.concat_after is None


class TestInfer:
    def test_identity_checkpoint_reproduces_bicubic(self, tmp_path):
        layer = ConvLayer(kernel=np.ones((1, 1, 1, 1), dtype=np.float32),
                          bias=np.zeros(1, dtype=np.float32),
                          activation="identity")
        net = Network(layers=[layer])
        ckpt = tmp_path / "id.stck"
        save_checkpoint(net, AdamState.for_network(net), ckpt)
        rng = np.random.default_rng(0)
        lr_img = rng.random((8, 8))
        cfg = TrainConfig(**FAST)
        sr = infer(ckpt, lr_img, cfg)
        expect = bicubic_resize(lr_img, 4).astype(np.float32)
        np.testing.assert_array_equal(sr.astype(np.float32), expect)

    def test_output_dims(self, tmp_path):
        cfg = TrainConfig(**{**FAST, "steps": 0, "w_t": 0.0})
        src = tmp_path / "src"
        src.mkdir()
        save_image(striped_image(np.random.default_rng(2), size=32),
                   src / "s.pgm", bit_depth=16)
        data = tmp_path / "data"
        prepare_dataset(src, data, cfg)
        ckpt, _ = train(cfg, data, None, tmp_path / "run")
        sr = infer(ckpt, np.random.default_rng(1).random((16, 16)), cfg)
        assert sr.shape == (64, 64)

    def test_tt_checkpoint_without_references(self, dataset_dir, tmp_path, slices_dir):
        ref = sorted(slices_dir.iterdir())[0]
        cfg_tt = TrainConfig(**{**FAST, "steps": 0},
                             reference_paths=str(ref))
        swaps = tmp_path / "swaps"
        precompute_swaps(dataset_dir, swaps, cfg_tt)
        ckpt, _ = train(cfg_tt, dataset_dir, swaps, tmp_path / "run")
        plain = TrainConfig(**{**FAST, "steps": 0})
        with pytest.raises(UsageError):
            infer(ckpt, np.zeros((8, 8)), plain)


class TestEvaluate:
    def test_method_against_itself_no_decision(self, tmp_path):
        test_dir = tmp_path / "test"
        make_family_dir(test_dir, 3, seed=20, size=32)
        cfg = TrainConfig(**FAST)
        rows, verdict = evaluate("bicubic", "bicubic", test_dir, cfg,
                                 out_csv=tmp_path / "scores.csv")
        assert len(rows) == 3
        assert verdict["psnr"]["method"] == "no-decision"
        assert verdict["psnr"]["winner"] == "none"
        text = render_verdict(verdict)
        assert "psnr.method=no-decision" in text

    def test_csv_roundtrip_and_row_count(self, tmp_path, dataset_dir):
        test_dir = tmp_path / "test"
        make_family_dir(test_dir, 4, seed=21, size=32)
        cfg = TrainConfig(**{**FAST, "steps": 0, "w_t": 0.0})
        ckpt, _ = train(cfg, dataset_dir, None, tmp_path / "run")
        csv_path = tmp_path / "scores.csv"
        rows, _ = evaluate(str(ckpt), "bicubic", test_dir, cfg, out_csv=csv_path)
        assert len(rows) == 4
        back = read_scores_csv(csv_path)
        assert len(back) == 4
        for a, b in zip(rows, back):
            assert a["psnr_a"] == b["psnr_a"]
            assert a["ssim_b"] == b["ssim_b"]

    def test_degraded_method_loses_significantly(self):
        # Wilcoxon wiring: clean method vs the same method plus noise, n >= 10
        rng = np.random.default_rng(22)
        rows = []
        for i in range(12):
            hr = striped_image(rng, size=32)
            clean = bicubic_resize(bicubic_resize(hr, 0.25), 4.0)
            noisy = np.clip(clean + 0.05 * rng.standard_normal(clean.shape), 0, 1)
            rows.append({
                "image_id": f"img{i}",
                "psnr_a": psnr(np.clip(clean, 0, 1), hr),
                "psnr_b": psnr(noisy, hr),
                "ssim_a": 1.0, "ssim_b": 0.9,
            })
        verdict = compare_scores(rows)
        assert verdict["psnr"]["significant_at_0.05"]
        assert verdict["psnr"]["winner"] == "a"

    def test_missing_method_rejected(self, tmp_path):
        test_dir = tmp_path / "test"
        make_family_dir(test_dir, 1, seed=23, size=32)
        with pytest.raises(DataError):
            evaluate("no_such.stck", "bicubic", test_dir, TrainConfig(**FAST))
