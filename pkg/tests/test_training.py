import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from feds.distillation import (STAGE_DISTILL, STAGE_FINETUNE, STAGE_TEACHER,
                               FEDSWeights, stage_plan)
from feds.training import (Checkpoint, DatasetSpec, OptimizerSpec, PatchStream,
                           TrainingDiverged, build_model, checkpoint_load,
                           checkpoint_save, dataset_spec_from_dir, derive_seed,
                           load_weights, parse_config_file, prepare_dataset,
                           resolve_seed, run_stage, snapshot_model_state,
                           validation_loss)

from conftest import toy_student_config, toy_teacher_config, write_corpus

OPT = OptimizerSpec(batch_size=2)
W = FEDSWeights(lam=0.015)


def tiny_plan(stage, iters):
    plan = stage_plan(stage)
    return dataclasses.replace(plan, total_iterations=iters)


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_imgs")
    write_corpus(root, 8, seed=5)
    return root


@pytest.fixture()
def spec(image_dir):
    return DatasetSpec(paths=sorted(image_dir.glob("*.png")), crop_size=64,
                       rescale_target=None)


class TestDatasetSpec:
    def test_crop_must_align(self):
        with pytest.raises(ValueError):
            DatasetSpec(paths=[], crop_size=60)

    def test_unknown_augmentation(self):
        with pytest.raises(ValueError):
            DatasetSpec(paths=[], crop_size=64, augmentations=frozenset({"zoom"}))

    def test_from_dir_sorted(self, image_dir):
        spec = dataset_spec_from_dir(image_dir, crop_size=64, rescale_target=None)
        assert spec.paths == sorted(spec.paths)
        assert len(spec.paths) == 8


class TestPatchStream:
    def test_same_seed_same_patches(self, spec):
        a = prepare_dataset(spec, 3)
        b = prepare_dataset(spec, 3)
        for _ in range(10):
            assert torch.equal(a.next_batch(4), b.next_batch(4))

    def test_different_seed_differs(self, spec):
        a = prepare_dataset(spec, 3).next_batch(8)
        b = prepare_dataset(spec, 4).next_batch(8)
        assert not torch.equal(a, b)

    def test_patch_shape_and_range(self, spec):
        batch = prepare_dataset(spec, 0).next_batch(6)
        assert batch.shape == (6, 3, 64, 64)
        assert batch.min() >= 0.0 and batch.max() <= 1.0

    def test_whole_image_when_crop_equals_size(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = (rng.random((64, 64, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / "a.png")
        spec = DatasetSpec(paths=[tmp_path / "a.png"], crop_size=64,
                           augmentations=frozenset(), rescale_target=None)
        batch = prepare_dataset(spec, 0).next_batch(1)
        expected = torch.from_numpy((arr.astype(np.float32) / 255).transpose(2, 0, 1))
        assert torch.allclose(batch[0], expected)

    def test_rotation_only_right_angles(self, tmp_path):
        # a half-black half-white image stays half-black half-white under
        # every rotation the stream is allowed to make
        arr = np.zeros((64, 64, 3), dtype=np.uint8)
        arr[:32] = 255
        Image.fromarray(arr).save(tmp_path / "a.png")
        spec = DatasetSpec(paths=[tmp_path / "a.png"], crop_size=64,
                           augmentations=frozenset({"rotation"}), rescale_target=None)
        stream = prepare_dataset(spec, 1)
        for _ in range(12):
            patch = stream.next_batch(1)[0]
            values = set(np.unique(patch.numpy()).tolist())
            assert values <= {0.0, 1.0}

    def test_small_images_padded_to_crop(self, tmp_path):
        arr = np.full((20, 30, 3), 128, dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / "small.png")
        spec = DatasetSpec(paths=[tmp_path / "small.png"], crop_size=64,
                           rescale_target=None)
        batch = prepare_dataset(spec, 0).next_batch(2)
        assert batch.shape == (2, 3, 64, 64)

    def test_unreadable_images_skipped(self, tmp_path, caplog):
        rng = np.random.default_rng(0)
        Image.fromarray((rng.random((70, 70, 3)) * 255).astype(np.uint8)).save(
            tmp_path / "good.png")
        (tmp_path / "bad.png").write_bytes(b"not an image")
        spec = DatasetSpec(paths=sorted(tmp_path.glob("*.png")), crop_size=64,
                           rescale_target=None)
        stream = prepare_dataset(spec, 0)
        assert len(stream.images) == 1

    def test_all_unreadable_is_error(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"nope")
        spec = DatasetSpec(paths=[tmp_path / "bad.png"], crop_size=64,
                           rescale_target=None)
        with pytest.raises(ValueError):
            prepare_dataset(spec, 0)

    def test_state_round_trip(self, spec):
        a = prepare_dataset(spec, 9)
        a.next_batch(4)
        state = a.state()
        first = a.next_batch(4)
        a.set_state(state)
        again = a.next_batch(4)
        assert torch.equal(first, again)


class TestSeeds:
    def test_env_overrides_config(self, monkeypatch):
        monkeypatch.setenv("FEDS_SEED", "123")
        assert resolve_seed(7) == 123
        monkeypatch.delenv("FEDS_SEED")
        assert resolve_seed(7) == 7
        assert resolve_seed(None) == 0

    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(1, "data") == derive_seed(1, "data")
        assert derive_seed(1, "data") != derive_seed(1, "noise")
        assert derive_seed(1, "data") != derive_seed(2, "data")


class TestCheckpointContainer:
    def make_checkpoint(self, seed=0):
        cfg = toy_student_config()
        model = build_model(cfg, lam=0.015, lambda_index=3, seed=seed)
        return Checkpoint(config=cfg, stage=STAGE_TEACHER, iteration=17,
                          lam=0.015, lambda_index=3,
                          model_state=snapshot_model_state(model),
                          feds={"alpha": 1.0, "beta": 0.5, "gamma": 0.5,
                                "distortion": "MSE"})

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self.make_checkpoint()
        path = tmp_path / "m.ckpt"
        checkpoint_save(ckpt, path)
        loaded = checkpoint_load(path)
        assert loaded.stage == ckpt.stage
        assert loaded.iteration == 17
        assert loaded.lam == ckpt.lam
        for key, tensor in ckpt.model_state.items():
            assert torch.equal(loaded.model_state[key], tensor)

    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt = self.make_checkpoint()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint_save(ckpt, p1)
        checkpoint_save(checkpoint_load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_reload(self, tmp_path):
        ckpt = self.make_checkpoint(seed=3)
        path = tmp_path / "m.ckpt"
        checkpoint_save(ckpt, path)
        model_a = ckpt.build_model()
        model_b = checkpoint_load(path).build_model()
        x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            a = model_a(x, mode="eval")
            b = model_b(x, mode="eval")
        assert torch.equal(a["x_hat"], b["x_hat"])

    def test_shape_mismatch_on_load(self):
        ckpt = self.make_checkpoint()
        other = build_model(toy_student_config(M=15), lam=0.015, seed=0)
        with pytest.raises(ValueError):
            load_weights(other, ckpt.model_state)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"garbage bytes")
        with pytest.raises(ValueError):
            checkpoint_load(path)


class TestRunStage:
    def test_loss_decreases_over_first_100_iterations(self, spec, tmp_path):
        drops = []
        for seed in range(5):
            model = build_model(toy_student_config(), lam=0.015, seed=seed)
            data = prepare_dataset(spec, derive_seed(seed, "data"))
            log_path = tmp_path / f"seed{seed}.jsonl"
            run_stage(tiny_plan(STAGE_TEACHER, 100), model, data, OPT, W,
                      seed=seed, log_path=log_path)
            totals = [json.loads(line)["total"] for line in log_path.open()]
            drops.append(np.mean(totals[-10:]) - np.mean(totals[:10]))
        assert float(np.median(drops)) < 0

    def test_stage_guards(self, spec):
        model = build_model(toy_student_config(), lam=0.015, seed=0)
        data = prepare_dataset(spec, 0)
        with pytest.raises(ValueError):
            run_stage(tiny_plan(STAGE_DISTILL, 2), model, data, OPT, W, seed=0)
        with pytest.raises(ValueError):
            run_stage(tiny_plan(STAGE_FINETUNE, 2), model, data, OPT, W, seed=0)

    def test_finetune_requires_distill_checkpoint(self, spec):
        model = build_model(toy_student_config(), lam=0.015, seed=0)
        data = prepare_dataset(spec, 0)
        teacher_ckpt = run_stage(tiny_plan(STAGE_TEACHER, 2), model, data, OPT, W,
                                 seed=0)
        with pytest.raises(ValueError):
            run_stage(tiny_plan(STAGE_FINETUNE, 2), model, data, OPT, W, seed=0,
                      init_from=teacher_ckpt)

    def test_teacher_frozen_during_distill(self, spec):
        teacher = build_model(toy_teacher_config(), lam=0.015, seed=0)
        student = build_model(toy_student_config(M=10), lam=0.015, seed=1)
        before = {k: v.clone() for k, v in teacher.state_dict().items()}
        data = prepare_dataset(spec, 0)
        run_stage(tiny_plan(STAGE_DISTILL, 3), student, data, OPT, W,
                  teacher=teacher, seed=0)
        after = teacher.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_zero_kd_weights_match_direct_training(self, spec):
        w0 = FEDSWeights(lam=0.015, alpha=0.0, beta=0.0, gamma=0.0)
        teacher = build_model(toy_teacher_config(), lam=0.015, seed=0)
        losses = {}
        for label, tch in (("with_teacher", teacher), ("direct", None)):
            model = build_model(toy_student_config(M=10), lam=0.015, seed=7)
            data = prepare_dataset(spec, derive_seed(7, "data"))
            log_path = None
            records = []
            import tempfile, os
            fd, log_path = tempfile.mkstemp(suffix=".jsonl")
            os.close(fd)
            run_stage(tiny_plan(STAGE_DISTILL, 8), model, data, OPT, w0,
                      teacher=tch, seed=7, log_path=log_path)
            with open(log_path) as fh:
                records = [json.loads(line) for line in fh]
            os.unlink(log_path)
            losses[label] = [r["total"] for r in records]
        diffs = [abs(a - b) for a, b in zip(losses["with_teacher"], losses["direct"])]
        assert max(diffs) <= 1e-12

    def test_resume_matches_uninterrupted(self, spec, tmp_path):
        plan_full = tiny_plan(STAGE_TEACHER, 12)
        plan_half = tiny_plan(STAGE_TEACHER, 6)

        model_a = build_model(toy_student_config(), lam=0.015, seed=2)
        data_a = prepare_dataset(spec, derive_seed(2, "data"))
        full = run_stage(plan_full, model_a, data_a, OPT, W, seed=2)

        model_b = build_model(toy_student_config(), lam=0.015, seed=2)
        data_b = prepare_dataset(spec, derive_seed(2, "data"))
        half = run_stage(plan_half, model_b, data_b, OPT, W, seed=2)
        path = tmp_path / "half.ckpt"
        checkpoint_save(half, path)
        mid = checkpoint_load(path)

        model_c = build_model(toy_student_config(), lam=0.015, seed=999)
        data_c = prepare_dataset(spec, derive_seed(2, "data"))
        resumed = run_stage(plan_full, model_c, data_c, OPT, W, seed=2, resume=mid)

        for key, tensor in full.model_state.items():
            assert torch.equal(resumed.model_state[key], tensor), key

    def test_two_identical_runs_bit_identical(self, spec):
        finals = []
        for _ in range(2):
            model = build_model(toy_student_config(), lam=0.015, seed=11)
            data = prepare_dataset(spec, derive_seed(11, "data"))
            ckpt = run_stage(tiny_plan(STAGE_TEACHER, 10), model, data, OPT, W,
                             seed=11)
            finals.append(ckpt.model_state)
        assert all(torch.equal(finals[0][k], finals[1][k]) for k in finals[0])

    def test_nan_abort_diagnostics(self, spec):
        model = build_model(toy_student_config(), lam=0.015, seed=0)
        with torch.no_grad():
            model.g_a.down1.weight.fill_(float("nan"))
        data = prepare_dataset(spec, 0)
        with pytest.raises(TrainingDiverged) as err:
            run_stage(tiny_plan(STAGE_TEACHER, 3), model, data, OPT, W, seed=0)
        assert err.value.iteration == 0
        assert "total" in err.value.breakdown

    def test_lr_follows_schedule(self, spec):
        import tempfile, os
        plan = dataclasses.replace(stage_plan(STAGE_TEACHER).scaled(30 / 180_000),
                                   total_iterations=30)
        model = build_model(toy_student_config(), lam=0.015, seed=0)
        data = prepare_dataset(spec, 0)
        fd, log_path = tempfile.mkstemp(suffix=".jsonl")
        os.close(fd)
        run_stage(plan, model, data, OPT, W, seed=0, log_path=log_path)
        with open(log_path) as fh:
            records = [json.loads(line) for line in fh]
        os.unlink(log_path)
        for rec in records:
            assert rec["lr"] == plan.lr_at(rec["iter"])
        assert records[0]["lr"] == 1e-4
        assert records[-1]["lr"] == pytest.approx(1e-6)

    def test_log_schema(self, spec):
        import tempfile, os
        model = build_model(toy_student_config(), lam=0.015, seed=0)
        data = prepare_dataset(spec, 0)
        fd, log_path = tempfile.mkstemp(suffix=".jsonl")
        os.close(fd)
        run_stage(tiny_plan(STAGE_TEACHER, 2), model, data, OPT, W, seed=0,
                  log_path=log_path)
        with open(log_path) as fh:
            rec = json.loads(fh.readline())
        os.unlink(log_path)
        assert set(rec) == {"iter", "stage", "D", "R_y", "R_z", "L_out", "L_feat",
                            "L_lat", "total", "lr"}


class TestConfigFiles:
    def test_parse_and_network_overrides(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "# comment\n"
            "network.M=24\n"
            "network.num_slices = 4\n"
            "train.seed=9\n"
            "feds.alpha=0.25\n")
        values = parse_config_file(cfg_file)
        assert values["network.M"] == "24"
        assert values["network.num_slices"] == "4"
        from feds.training import network_config_from_dict

        cfg = network_config_from_dict(values, "student")
        assert cfg.M == 24
        assert cfg.num_slices == 4
        assert cfg.role == "student"

    def test_malformed_line(self, tmp_path):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("this is not a key value line\n")
        with pytest.raises(ValueError):
            parse_config_file(cfg_file)
