import json
import os

import numpy as np
import pytest
import torch

import mgedge.train as train_mod
from mgedge.backbone import ProviderConfig, ToyBackbone
from mgedge.cli import main as cli_main
from mgedge.cli import read_config_items, train_config_from_items
from mgedge.data import AugmentConfig, load_image_png
from mgedge.errors import CheckpointError, InputError, TrainingDiverged
from mgedge.stn import StnConfig
from mgedge.toydata import build_toy_dataset
from mgedge.train import (
    AblationSwitches,
    TrainConfig,
    infer,
    infer_maps,
    load_for_inference,
    run_training,
    save_checkpoint,
    _load_into,
)


def tiny_train_cfg(**overrides) -> TrainConfig:
    provider = ProviderConfig(
        provider_kind="toy",
        seed=5,
        grid_side=2,
        feature_size=6,
        shallow_channels=4,
        embed_channels=4,
        mask_channels=3,
        mask_embed_size=4,
    )
    stn = StnConfig.from_provider(
        provider,
        proj_channels=4,
        mask_proj_channels=2,
        head_channels=4,
        attn_heads=2,
        ffb_depth=1,
        ffn_expansion=2.0,
        head_factors=(2, 2),
        head_mid_channels=4,
    )
    base = dict(
        learning_rate=1e-3,
        epochs=2,
        batch_size=2,
        seed=7,
        zeta=0.2,
        provider=provider,
        stn=stn,
        augment=AugmentConfig(),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def toy_manifest(tmp_path):
    return build_toy_dataset(str(tmp_path / "data"), n_images=2, size=24, seed=1)


def read_log(out_dir):
    with open(os.path.join(out_dir, "train_log.jsonl")) as fh:
        return [json.loads(line) for line in fh]


class TestTraining:
    def test_log_schema_and_decrease(self, toy_manifest, tmp_path):
        cfg = tiny_train_cfg(epochs=8)
        result = run_training(cfg, toy_manifest, str(tmp_path / "run"))
        assert len(result.log) == 8  # one batch of two images per epoch
        for record in result.log:
            assert set(record) == {
                "step", "epoch", "lr", "l_side", "l_differ", "l_guide", "l_total",
            }
        assert result.log[-1]["l_total"] < result.log[0]["l_total"]
        assert read_log(str(tmp_path / "run")) == result.log

    def test_provider_state_untouched(self, toy_manifest, tmp_path):
        cfg = tiny_train_cfg()
        provider = ToyBackbone(cfg.provider)
        before = provider.state_hash()
        run_training(cfg, toy_manifest, str(tmp_path / "run"))
        assert ToyBackbone(cfg.provider).state_hash() == before

    def test_lr_schedule_step_decay(self, toy_manifest, tmp_path):
        cfg = tiny_train_cfg(epochs=6, lr_decay_epoch=4)
        result = run_training(cfg, toy_manifest, str(tmp_path / "run"))
        lrs = [r["lr"] for r in result.log]
        assert lrs[:4] == [1e-3] * 4
        assert lrs[4:] == [1e-4] * 2

    def test_nan_loss_aborts_with_checkpoint(self, toy_manifest, tmp_path, monkeypatch):
        cfg = tiny_train_cfg()
        original = train_mod._batch_losses
        calls = {"n": 0}

        def poisoned(outputs, batch, cfg_, switches):
            calls["n"] += 1
            total, breakdown = original(outputs, batch, cfg_, switches)
            if calls["n"] >= 2:
                breakdown.l_total = float("nan")
            return total, breakdown

        monkeypatch.setattr(train_mod, "_batch_losses", poisoned)
        with pytest.raises(TrainingDiverged) as err:
            run_training(cfg, toy_manifest, str(tmp_path / "run"))
        assert err.value.last_checkpoint is not None
        assert os.path.exists(err.value.last_checkpoint)


class TestCheckpointing:
    def test_roundtrip_byte_identical(self, toy_manifest, tmp_path):
        cfg = tiny_train_cfg()
        result = run_training(cfg, toy_manifest, str(tmp_path / "run"))
        first = result.checkpoint_path

        torch.manual_seed(0)
        model = train_mod.SideTransferNetwork(cfg.resolved_stn())
        optimizer = torch.optim.Adam(
            model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        meta = _load_into(model, optimizer, first)
        second = str(tmp_path / "second.ckpt")
        save_checkpoint(
            second, model, optimizer, cfg, meta["epoch"], meta["step"], AblationSwitches()
        )
        assert open(first, "rb").read() == open(second, "rb").read()

    def test_resume_continues_trace(self, toy_manifest, tmp_path):
        cfg = tiny_train_cfg(epochs=4)
        full = run_training(cfg, toy_manifest, str(tmp_path / "full"))
        resumed = run_training(
            cfg,
            toy_manifest,
            str(tmp_path / "resumed"),
            resume=str(tmp_path / "full" / "epoch_001.ckpt"),
        )
        tail = [r for r in full.log if r["epoch"] >= 2]
        assert len(resumed.log) == len(tail)
        for a, b in zip(tail, resumed.log):
            assert a["step"] == b["step"]
            assert a["l_total"] == pytest.approx(b["l_total"], abs=1e-9)
        assert (
            open(full.checkpoint_path, "rb").read()
            == open(resumed.checkpoint_path, "rb").read()
        )

    def test_resume_rejects_config_mismatch(self, toy_manifest, tmp_path):
        cfg = tiny_train_cfg()
        result = run_training(cfg, toy_manifest, str(tmp_path / "run"))
        other = tiny_train_cfg(learning_rate=5e-4)
        with pytest.raises(CheckpointError):
            run_training(other, toy_manifest, str(tmp_path / "r2"), resume=result.checkpoint_path)


class TestAblations:
    def test_differ_off_equals_lambda_zero(self, toy_manifest, tmp_path):
        cfg = tiny_train_cfg(epochs=3)
        switched = run_training(
            cfg, toy_manifest, str(tmp_path / "a"), switches=AblationSwitches(differ_off=True)
        )
        zeroed = run_training(
            tiny_train_cfg(epochs=3, lam=0.0), toy_manifest, str(tmp_path / "b")
        )
        for a, b in zip(switched.log, zeroed.log):
            assert a["l_total"] == b["l_total"]
            assert a["l_side"] == b["l_side"]
            assert a["l_differ"] == b["l_differ"]
            assert a["l_guide"] == b["l_guide"]

    def test_zero_coefficients_match_guide_only_trace(self, toy_manifest, tmp_path):
        plain = run_training(
            tiny_train_cfg(epochs=3, lam=0.0, beta=0.0), toy_manifest, str(tmp_path / "a")
        )
        guide_only = run_training(
            tiny_train_cfg(epochs=3),
            toy_manifest,
            str(tmp_path / "b"),
            switches=AblationSwitches(soc_off=True),
        )
        for a, b in zip(plain.log, guide_only.log):
            assert a["l_total"] == b["l_total"]
            assert a["l_guide"] == b["l_guide"]

    def test_soc_off_rejects_granularity_inference(self, toy_manifest, tmp_path, rng):
        cfg = tiny_train_cfg()
        result = run_training(
            cfg, toy_manifest, str(tmp_path / "run"), switches=AblationSwitches(soc_off=True)
        )
        image = rng.random((24, 24, 3))
        fused = infer(result.checkpoint_path, image)
        assert fused.shape == (24, 24)
        with pytest.raises(InputError):
            infer(result.checkpoint_path, image, alpha=0.3)
        with pytest.raises(InputError):
            infer(result.checkpoint_path, image, m=3)

    def test_all_switches_off_is_default_train(self, toy_manifest, tmp_path):
        a = run_training(tiny_train_cfg(), toy_manifest, str(tmp_path / "a"))
        b = run_training(
            tiny_train_cfg(), toy_manifest, str(tmp_path / "b"), switches=AblationSwitches()
        )
        for ra, rb in zip(a.log, b.log):
            assert ra == rb

    def test_guide_off_changes_guide_term_only_at_uniform_weights(self, toy_manifest, tmp_path):
        # with guidance weights present the traces must differ
        a = run_training(tiny_train_cfg(epochs=1), toy_manifest, str(tmp_path / "a"))
        b = run_training(
            tiny_train_cfg(epochs=1),
            toy_manifest,
            str(tmp_path / "b"),
            switches=AblationSwitches(guide_off=True),
        )
        assert a.log[0]["l_guide"] != b.log[0]["l_guide"]
        assert a.log[0]["l_side"] == b.log[0]["l_side"]


class TestInference:
    def test_alpha_half_equals_medium_side_output(self, toy_manifest, tmp_path, rng):
        cfg = tiny_train_cfg(epochs=1)
        result = run_training(cfg, toy_manifest, str(tmp_path / "run"))
        image = rng.random((24, 24, 3))
        blended = infer(result.checkpoint_path, image, alpha=0.5)
        model, provider, _ = load_for_inference(result.checkpoint_path)
        maps = infer_maps(model, provider, image)
        np.testing.assert_array_equal(blended, maps.medium)

    def test_inference_deterministic(self, toy_manifest, tmp_path, rng):
        cfg = tiny_train_cfg(epochs=1)
        result = run_training(cfg, toy_manifest, str(tmp_path / "run"))
        image = rng.random((24, 24, 3))
        a = infer(result.checkpoint_path, image)
        b = infer(result.checkpoint_path, image)
        np.testing.assert_array_equal(a, b)

    def test_alpha_and_m_exclusive(self, toy_manifest, tmp_path, rng):
        result = run_training(tiny_train_cfg(epochs=1), toy_manifest, str(tmp_path / "run"))
        with pytest.raises(InputError):
            infer(result.checkpoint_path, rng.random((24, 24, 3)), alpha=0.5, m=3)


class TestCli:
    def write_config(self, tmp_path) -> str:
        cfg_path = str(tmp_path / "run.cfg")
        lines = [
            "learning_rate=1e-3",
            "epochs=1",
            "batch_size=2",
            "seed=7",
            "provider.seed=5",
            "provider.grid_side=2",
            "provider.feature_size=6",
            "provider.shallow_channels=4",
            "provider.embed_channels=4",
            "provider.mask_channels=3",
            "provider.mask_embed_size=4",
            "stn.shallow_channels=4",
            "stn.embed_channels=4",
            "stn.mask_channels=3",
            "stn.n_prompts=4",
            "stn.proj_channels=4",
            "stn.mask_proj_channels=2",
            "stn.head_channels=4",
            "stn.attn_heads=2",
            "stn.ffb_depth=1",
            "stn.ffn_expansion=2.0",
            "stn.head_factors=[2, 2]",
            "stn.head_mid_channels=4",
        ]
        with open(cfg_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return cfg_path

    def test_config_file_and_overrides(self, tmp_path):
        cfg_path = self.write_config(tmp_path)
        items = read_config_items(cfg_path, ["epochs=3", "provider.seed=9"])
        cfg = train_config_from_items(items)
        assert cfg.epochs == 3
        assert cfg.provider.seed == 9
        assert cfg.stn.head_factors == (2, 2)

    def test_full_cli_round_trip(self, tmp_path, toy_manifest):
        cfg_path = self.write_config(tmp_path)
        run_dir = str(tmp_path / "run")
        assert cli_main([
            "train", "--manifest", toy_manifest, "--out-dir", run_dir,
            "--config", cfg_path, "--set", "epochs=2",
        ]) == 0
        ckpt = os.path.join(run_dir, "latest.ckpt")
        assert os.path.exists(ckpt)

        image_path = os.path.join(os.path.dirname(toy_manifest), "images", "img000.png")
        pred_dir = str(tmp_path / "preds")
        assert cli_main([
            "infer", "--checkpoint", ckpt, "--image", image_path,
            "--out-dir", pred_dir, "--candidates", "3",
        ]) == 0
        for k in range(3):
            assert os.path.exists(os.path.join(pred_dir, f"img000_a{k:02d}.png"))

        assert cli_main([
            "infer", "--checkpoint", ckpt, "--image", image_path, "--out-dir", pred_dir,
        ]) == 0
        assert os.path.exists(os.path.join(pred_dir, "img000.png"))

        assert cli_main([
            "infer", "--checkpoint", ckpt, "--image", image_path,
            "--out-dir", pred_dir, "--alpha", "0.25",
        ]) == 0
        assert os.path.exists(os.path.join(pred_dir, "img000_alpha0.25.png"))

    def test_cli_evaluate_and_labels(self, tmp_path, toy_manifest):
        data_dir = os.path.dirname(toy_manifest)
        gt_dir = os.path.join(data_dir, "annotations")
        pred_dir = str(tmp_path / "preds")
        os.makedirs(pred_dir)
        # use each image's densest annotation as its prediction
        for image_id in ("img000", "img001"):
            mask = load_image_png(os.path.join(data_dir, "images", image_id + ".png"))
            import shutil

            shutil.copy(
                os.path.join(gt_dir, image_id, "2.png"),
                os.path.join(pred_dir, image_id + ".png"),
            )
        report_path = str(tmp_path / "report.json")
        csv_path = str(tmp_path / "pr.csv")
        assert cli_main([
            "evaluate", "--pred-dir", pred_dir, "--gt-dir", gt_dir,
            "--thresholds", "9", "--no-nms",
            "--out", report_path, "--pr-csv", csv_path,
        ]) == 0
        report = json.loads(open(report_path).read())
        assert report["ods_f"] > 0.9
        assert os.path.exists(csv_path)

        labels_dir = str(tmp_path / "labels")
        assert cli_main([
            "build-labels", "--manifest", toy_manifest, "--out-dir", labels_dir,
        ]) == 0
        for suffix in ("coarse", "medium", "fine", "consensus", "soft"):
            assert os.path.exists(os.path.join(labels_dir, f"img000_{suffix}.png"))

    def test_cli_error_reporting(self, tmp_path):
        rc = cli_main([
            "evaluate", "--pred-dir", str(tmp_path), "--gt-dir", str(tmp_path),
        ])
        assert rc == 2

    def test_eleven_candidate_sweep_file_names(self, tmp_path, toy_manifest):
        result = run_training(tiny_train_cfg(epochs=1), toy_manifest, str(tmp_path / "run"))
        image_path = os.path.join(os.path.dirname(toy_manifest), "images", "img001.png")
        pred_dir = str(tmp_path / "preds")
        assert cli_main([
            "infer", "--checkpoint", result.checkpoint_path, "--image", image_path,
            "--out-dir", pred_dir, "--candidates", "11",
        ]) == 0
        names = sorted(os.listdir(pred_dir))
        assert names == [f"img001_a{k:02d}.png" for k in range(11)]


class TestCacheDir:
    def test_env_var_sets_cache_dir(self, tmp_path, toy_manifest, monkeypatch):
        cache_dir = str(tmp_path / "cache")
        monkeypatch.setenv("MGEDGE_CACHE_DIR", cache_dir)
        cfg = tiny_train_cfg(epochs=1)
        assert cfg.cache_dir is None
        run_training(cfg, toy_manifest, str(tmp_path / "run"))
        assert os.path.isdir(cache_dir)
        assert any(name.endswith(".feat") for name in os.listdir(cache_dir))

    def test_explicit_config_wins_over_env(self, tmp_path, monkeypatch):
        from mgedge.train import effective_cache_dir

        monkeypatch.setenv("MGEDGE_CACHE_DIR", "/env/path")
        assert effective_cache_dir(tiny_train_cfg(cache_dir="/cfg/path")) == "/cfg/path"
        assert effective_cache_dir(tiny_train_cfg()) == "/env/path"
