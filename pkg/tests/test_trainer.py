import hashlib
import json

import numpy as np
import pytest
import torch

from fbw3d.datamodel import FetalCase, VolumeGrid, read_manifest
from fbw3d.network import build_model
from fbw3d.trainer import (
    Schedule,
    TrainConfig,
    Trainer,
    augment,
    batch_tensors,
    fit,
    load_checkpoint,
    make_schedule,
    model_from_checkpoint,
    restore_trainer,
    steps_per_epoch,
)

TINY = dict(
    epochs=2, batch_size=4, width_multiplier=0.125, input_dims=(32, 32, 32),
    warmup_epochs=1, base_lr=1e-3,
)

IDENTITY_AUG = dict(
    flip_prob=0.0, rotate_deg=0.0, scale_min=1.0, scale_max=1.0,
    brightness=0.0, contrast_min=1.0, contrast_max=1.0,
)


def tiny_config(**over):
    kw = {**TINY, **over}
    return TrainConfig(**kw)


class TestTrainConfig:
    def test_defaults_match_protocol(self):
        cfg = TrainConfig()
        assert cfg.epochs == 200
        assert cfg.batch_size == 16
        assert cfg.base_lr == 1e-4
        assert cfg.warmup_epochs == 5
        assert cfg.alpha == 0.001
        assert cfg.beta_end == 0.2
        assert (cfg.m_start, cfg.m_end) == (0.99, 0.9999)
        assert cfg.input_dims == (160, 128, 96)

    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config(seed=9)
        path = tmp_path / "config.json"
        cfg.to_json(path)
        assert TrainConfig.from_json(path) == cfg

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"epochs": 2, "learning_rate": 1.0}))
        with pytest.raises(KeyError, match="learning_rate"):
            TrainConfig.from_json(path)

    def test_warmup_must_fit(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=5, warmup_epochs=5)


class TestSchedules:
    def make(self, total=1000, warmup=50, base_lr=1e-4):
        return Schedule(total, warmup, base_lr, 0.2, 0.99, 0.9999)

    def test_lr_ramp(self):
        s = self.make()
        assert s.lr_at(0) == 0.0
        assert s.lr_at(50) == pytest.approx(1e-4)
        assert s.lr_at(25) == pytest.approx(0.5e-4)

    def test_lr_cosine_endpoint(self):
        s = self.make()
        assert s.lr_at(1000) == pytest.approx(0.0, abs=1e-12)

    def test_beta_linear(self):
        s = self.make()
        assert s.beta_at(0) == 0.0
        assert s.beta_at(500) == pytest.approx(0.1)
        assert s.beta_at(1000) == pytest.approx(0.2)

    def test_momentum_endpoints(self):
        s = self.make()
        assert s.m_at(0) == pytest.approx(0.99, abs=1e-12)
        assert s.m_at(1000) == pytest.approx(0.9999, abs=1e-12)

    def test_pure_function_of_step(self):
        s = self.make()
        values = [(s.lr_at(k), s.beta_at(k), s.m_at(k)) for k in (0, 123, 777)]
        again = [(s.lr_at(k), s.beta_at(k), s.m_at(k)) for k in (0, 123, 777)]
        assert values == again

    def test_steps_per_epoch_drops_singletons(self):
        assert steps_per_epoch(8, 4) == 2
        assert steps_per_epoch(9, 4) == 2  # trailing batch of 1 dropped
        assert steps_per_epoch(10, 4) == 3


def _case(seed=0, dims=(16, 16, 16)):
    rng = np.random.default_rng(seed)
    vol = lambda: VolumeGrid(rng.random(dims, dtype=np.float32), (2.0, 2.0, 2.0))
    return FetalCase(vol(), vol(), interval_days=2, weight_g=3000.0, case_id=f"c{seed}")


class TestAugment:
    def test_identity_when_ranges_collapsed(self):
        cfg = tiny_config(**IDENTITY_AUG)
        case = _case(1)
        out = augment(case, np.random.default_rng(0), cfg)
        assert np.array_equal(out.head.voxels, case.head.voxels)
        assert np.array_equal(out.abdomen.voxels, case.abdomen.voxels)
        assert out.head.spacing == case.head.spacing

    def test_label_and_interval_unchanged(self):
        cfg = tiny_config()
        case = _case(2)
        out = augment(case, np.random.default_rng(3), cfg)
        assert out.weight_g == case.weight_g
        assert out.interval_days == case.interval_days

    def test_deterministic_given_seed(self):
        cfg = tiny_config()
        case = _case(4)
        a = augment(case, np.random.default_rng(5), cfg)
        b = augment(case, np.random.default_rng(5), cfg)
        assert np.array_equal(a.head.voxels, b.head.voxels)
        assert a.head.spacing == b.head.spacing

    def test_scaling_updates_spacing_inversely(self):
        cfg = tiny_config(**{**IDENTITY_AUG, "scale_min": 1.1, "scale_max": 1.1})
        case = _case(6)
        out = augment(case, np.random.default_rng(7), cfg)
        assert out.head.spacing[0] == pytest.approx(case.head.spacing[0] / 1.1)

    def test_head_and_abdomen_independent(self):
        cfg = tiny_config(**{**IDENTITY_AUG, "flip_prob": 0.5})
        case = FetalCase(_case(8).head, _case(8).head, 0, 2000.0, "same")
        # same source volume for both sites; some seed must flip them apart
        differs = any(
            not np.array_equal(out.head.voxels, out.abdomen.voxels)
            for out in (
                augment(case, np.random.default_rng(s), cfg) for s in range(20)
            )
        )
        assert differs


def _state_hash(module):
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(value.numpy().tobytes())
    return h.hexdigest()


def _random_batch(n=4, seed=0):
    torch.manual_seed(seed)
    return (
        torch.randn(n, 5, 32, 32, 32),
        torch.randn(n, 5, 32, 32, 32),
        torch.rand(n),
    )


def _make_trainer(seed=0, use_sslf=True, use_rank=True, beta_end=0.2):
    cfg = tiny_config(seed=seed, beta_end=beta_end)
    model = build_model(cfg.width_multiplier, seed=seed)
    return Trainer(
        model=model, config=cfg, schedule=make_schedule(cfg, 4),
        use_sslf=use_sslf, use_rank_loss=use_rank,
    )


class TestTrainStep:
    def test_breakdown_composition_exact(self):
        tr = _make_trainer(seed=1)
        tr.global_step = 5  # past warmup so beta > 0
        hx, ax, y = _random_batch(seed=1)
        out = tr.train_step(hx, ax, y)
        assert out["reg"] >= 0 and out["rank"] >= 0 and out["semi"] >= 0
        assert out["total"] == pytest.approx(
            out["reg"] + 0.001 * out["rank"] + out["beta"] * out["semi"], rel=1e-6
        )

    def test_first_step_deterministic(self):
        losses = []
        for _ in range(2):
            tr = _make_trainer(seed=2)
            hx, ax, y = _random_batch(seed=2)
            losses.append(tr.train_step(hx, ax, y)["total"])
        assert abs(losses[0] - losses[1]) < 1e-6

    def test_encoder_pass_budget(self):
        tr = _make_trainer(seed=3)
        tr.global_step = 5
        hx, ax, y = _random_batch(n=4, seed=3)
        tr.model.encoder_passes = 0
        tr.teacher.encoder_passes = 0
        tr.train_step(hx, ax, y)
        assert tr.model.encoder_passes == 8  # 2N student passes
        assert tr.teacher.encoder_passes == 8  # 2N teacher passes

    def test_beta_zero_matches_supervised_run_byte_for_byte(self):
        runs = []
        for use_sslf in (True, False):
            tr = _make_trainer(seed=4, use_sslf=use_sslf, beta_end=0.0)
            for step in range(3):
                hx, ax, y = _random_batch(seed=10 + step)
                out = tr.train_step(hx, ax, y)
                assert out["semi"] == 0.0
            runs.append(_state_hash(tr.model))
        assert runs[0] == runs[1]

    def test_unlabeled_batch_rejected(self):
        cfg = tiny_config()
        case = FetalCase(_case(0).head, _case(0).abdomen, 1, None, "x")
        with pytest.raises(ValueError, match="weight"):
            batch_tensors([case], cfg)

    def test_needs_pairs(self):
        tr = _make_trainer(seed=5)
        hx, ax, y = _random_batch(n=1, seed=5)
        with pytest.raises(ValueError, match="N >= 2"):
            tr.train_step(hx, ax, y)

    def test_teacher_tracks_student_via_ema_only(self):
        tr = _make_trainer(seed=6)
        before = _state_hash(tr.teacher)
        hx, ax, y = _random_batch(seed=6)
        tr.train_step(hx, ax, y)
        after = _state_hash(tr.teacher)
        assert after != before  # EMA moved it
        assert all(not p.requires_grad for p in tr.teacher.parameters())


@pytest.fixture(scope="module")
def tiny_fit(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    cfg = tiny_config(seed=21)
    result = fit(tiny_dataset, cfg, out)
    return result, cfg


class TestFit:
    def test_smoke_writes_artifacts(self, tiny_fit):
        result, _ = tiny_fit
        assert result.best_checkpoint.exists()
        assert result.last_checkpoint.exists()
        rows = [json.loads(l) for l in result.history_path.read_text().splitlines()]
        assert len(rows) == 2
        for row in rows:
            assert set(row) == {
                "epoch", "lr", "beta", "m", "train_losses",
                "val_mae_g", "val_rmse_g", "val_mape_pct",
            }
            assert set(row["train_losses"]) == {"reg", "rank", "semi", "total"}

    def test_checkpoint_round_trip_bit_exact(self, tiny_fit):
        result, _ = tiny_fit
        payload = load_checkpoint(result.last_checkpoint)
        model, normalizer, config = model_from_checkpoint(payload, "student")
        reload_payload = load_checkpoint(result.last_checkpoint)
        for key, value in payload["student_state"].items():
            assert torch.equal(value, reload_payload["student_state"][key])
            assert torch.equal(model.state_dict()[key], value)
        assert normalizer.w_max == config.w_max

    def test_resume_restores_schedule_position(self, tiny_dataset, tmp_path):
        cfg = tiny_config(seed=22, epochs=3)
        first = fit(tiny_dataset, cfg, tmp_path / "a")
        payload = load_checkpoint(first.last_checkpoint)
        spe = steps_per_epoch(8, cfg.batch_size)
        trainer, _, epoch, _ = restore_trainer(payload, spe)
        assert epoch == 3
        assert trainer.global_step == 3 * spe
        sched = make_schedule(cfg, spe)
        assert trainer.schedule.lr_at(trainer.global_step) == sched.lr_at(3 * spe)
        assert trainer.schedule.beta_at(trainer.global_step) == sched.beta_at(3 * spe)
        assert trainer.schedule.m_at(trainer.global_step) == sched.m_at(3 * spe)

    def test_fixed_seed_reruns_identical_first_epoch(self, tiny_dataset, tmp_path):
        rows = []
        for name in ("r1", "r2"):
            cfg = tiny_config(seed=23, epochs=1, warmup_epochs=0)
            result = fit(tiny_dataset, cfg, tmp_path / name)
            rows.append(json.loads(result.history_path.read_text().splitlines()[0]))
        assert abs(rows[0]["train_losses"]["total"] - rows[1]["train_losses"]["total"]) < 1e-6
        assert rows[0]["val_mae_g"] == pytest.approx(rows[1]["val_mae_g"], abs=1e-6)

    def test_missing_split_rejected(self, tmp_path, tiny_dataset):
        records = read_manifest(tiny_dataset)
        from fbw3d.datamodel import write_manifest
        import dataclasses as dc

        only_train = [dc.replace(r, split="train") for r in records]
        bad = tmp_path / "manifest.json"
        write_manifest(only_train, bad)
        (tmp_path / "volumes").symlink_to(tiny_dataset.parent / "volumes")
        with pytest.raises(ValueError, match="val"):
            fit(bad, tiny_config(), tmp_path / "out")
