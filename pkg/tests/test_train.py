import json
import struct

import numpy as np
import pytest

from relnet.checkpoint import (
    CheckpointError,
    TrainingState,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from relnet.data import DataError, make_glyph_dataset, make_synthetic_zsl
from relnet.model import ModelConfig, RelationNetwork, ZslConfig, ZslRelationNetwork
from relnet.optim import AdamState, adam_step
from relnet.train import (
    NumericError,
    TrainConfig,
    checkpoint_name,
    lr_schedule,
    train_fewshot,
    train_rng,
    train_zsl,
)


@pytest.fixture(scope="module")
def glyphs():
    return make_glyph_dataset(6, 8, seed=0)


def tiny_model():
    return ModelConfig.omniglot(channels=4)


def tiny_fewshot(**kw):
    base = dict(ways=3, shots=1, queries=2, total_episodes=20, log_every=5, seed=1)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def zsl_data():
    return make_synthetic_zsl(n_seen=6, n_unseen=2, dim=5, train_per_class=10, test_per_class=4, seed=0)


def tiny_zsl_model():
    return ZslConfig(attribute_dim=5, fc1_hidden=8, feature_dim=5, fc3_hidden=6)


class TestSchedule:
    def test_examples(self):
        assert lr_schedule(1e-3, 0, 100_000) == 1e-3
        assert lr_schedule(1e-3, 100_000, 100_000) == 5e-4
        assert lr_schedule(1e-5, 400_000, 200_000) == pytest.approx(2.5e-6)

    def test_just_before_halving(self):
        assert lr_schedule(1e-3, 99_999, 100_000) == 1e-3

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_schedule(1e-3, -1, 10)

    def test_mode_defaults(self):
        few, zsl = TrainConfig(mode="fewshot"), TrainConfig(mode="zsl")
        assert (few.base_lr, few.lr_halving_period, few.weight_decay) == (1e-3, 100_000, 0.0)
        assert (zsl.base_lr, zsl.lr_halving_period, zsl.weight_decay) == (1e-5, 200_000, 1e-5)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="other")
        with pytest.raises(ValueError):
            TrainConfig(total_episodes=0)


class TestFewshot:
    def test_loss_decreases_on_two_classes(self):
        ds = make_glyph_dataset(2, 10, seed=3)
        cfg = TrainConfig(ways=2, shots=1, queries=3, total_episodes=200, log_every=50, seed=0)
        result = train_fewshot(cfg, tiny_model(), ds)
        assert all(np.isfinite(result.losses))
        assert np.mean(result.losses[-50:]) < np.mean(result.losses[:20])

    def test_same_seed_same_bytes(self, glyphs, tmp_path):
        a = train_fewshot(tiny_fewshot(), tiny_model(), glyphs, outdir=tmp_path / "a")
        b = train_fewshot(tiny_fewshot(), tiny_model(), glyphs, outdir=tmp_path / "b")
        assert a.losses == b.losses
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
        assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()

    def test_resume_is_bitwise(self, glyphs, tmp_path):
        full = train_fewshot(tiny_fewshot(), tiny_model(), glyphs, outdir=tmp_path / "full")
        train_fewshot(tiny_fewshot(total_episodes=7), tiny_model(), glyphs, outdir=tmp_path / "part")
        resumed = train_fewshot(tiny_fewshot(), tiny_model(), glyphs, outdir=tmp_path / "part",
                                resume=tmp_path / "part" / checkpoint_name(7))
        assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()
        assert resumed.losses == full.losses[7:]

    def test_metrics_csv(self, glyphs, tmp_path):
        train_fewshot(tiny_fewshot(), tiny_model(), glyphs, outdir=tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,loss,lr,val_acc"
        assert [int(line.split(",")[0]) for line in lines[1:]] == [5, 10, 15, 20]

    def test_periodic_checkpoints(self, glyphs, tmp_path):
        train_fewshot(tiny_fewshot(checkpoint_every=10), tiny_model(), glyphs, outdir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("*.rnc")) == ["ckpt_10.rnc", "ckpt_20.rnc"]

    def test_validation_column(self, glyphs, tmp_path):
        cfg = tiny_fewshot(eval_every=10, eval_episodes=3)
        result = train_fewshot(cfg, tiny_model(), glyphs, val_ds=glyphs, outdir=tmp_path)
        vals = [row[3] for row in result.log]
        assert vals[1] is not None and vals[0] is None

    def test_nan_aborts_with_dump(self, glyphs, tmp_path):
        bad = make_glyph_dataset(3, 3, seed=1)
        for items in bad.classes.values():
            items[...] = np.nan
        with pytest.raises(NumericError, match="non-finite"):
            train_fewshot(tiny_fewshot(), tiny_model(), bad, outdir=tmp_path)
        dump = json.loads((tmp_path / "nan_dump.json").read_text())
        assert dump["step"] == 0 and len(dump["class_ids"]) == 3

    def test_resume_with_other_seed_rejected(self, glyphs, tmp_path):
        res = train_fewshot(tiny_fewshot(total_episodes=2), tiny_model(), glyphs, outdir=tmp_path)
        with pytest.raises(ValueError):
            train_fewshot(tiny_fewshot(seed=9), tiny_model(), glyphs, resume=res.checkpoint)


class TestZsl:
    def test_single_step_decay_targets_semantic_mlp(self):
        net = ZslRelationNetwork(tiny_zsl_model(), seed=0)
        before = {k: v.data.copy() for k, v in net.params.items()}
        adam = AdamState(lr=0.1, weight_decay=1e-2, decay_names=net.decay_names)
        for p in net.params.values():
            p.grad = np.zeros_like(p.data)
        adam_step(net.params, adam)
        for name, p in net.params.items():
            if name.startswith("semantic."):
                np.testing.assert_allclose(p.data, before[name] * (1 - 0.1 * 1e-2), rtol=1e-6)
            else:
                np.testing.assert_array_equal(p.data, before[name])

    def test_decay_difference_is_exact(self, zsl_data):
        train, _ = zsl_data
        runs = {}
        for wd in (0.0, 1e-5):
            cfg = TrainConfig(mode="zsl", total_episodes=1, batch_size=8, weight_decay=wd, base_lr=1e-3, seed=4)
            # float64 start so the 1e-8 decay term is resolvable
            net = ZslRelationNetwork(tiny_zsl_model(), seed=4, dtype=np.float64)
            start = TrainingState(net, cfg.adam(net.decay_names), 0, train_rng(cfg.seed))
            runs[wd] = train_zsl(cfg, tiny_zsl_model(), train, resume=start).state.model
        p0 = ZslRelationNetwork(tiny_zsl_model(), seed=4, dtype=np.float64).params
        for name, p in runs[1e-5].params.items():
            diff = runs[0.0].params[name].data - p.data
            expected = 1e-3 * 1e-5 * p0[name].data if name.startswith("semantic.") else 0.0
            np.testing.assert_allclose(diff, expected, rtol=1e-6, atol=1e-15)

    def test_runs_and_resumes(self, zsl_data, tmp_path):
        train, _ = zsl_data
        cfg = TrainConfig(mode="zsl", total_episodes=12, batch_size=8, base_lr=1e-3, log_every=4, seed=2)
        full = train_zsl(cfg, tiny_zsl_model(), train, outdir=tmp_path / "full")
        part_cfg = TrainConfig(mode="zsl", total_episodes=5, batch_size=8, base_lr=1e-3, log_every=4, seed=2)
        train_zsl(part_cfg, tiny_zsl_model(), train, outdir=tmp_path / "part")
        resumed = train_zsl(cfg, tiny_zsl_model(), train, outdir=tmp_path / "part",
                            resume=tmp_path / "part" / checkpoint_name(5))
        assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()

    def test_unseen_rows_rejected(self, zsl_data):
        _, test = zsl_data
        with pytest.raises(DataError, match="unseen"):
            train_zsl(TrainConfig(mode="zsl", batch_size=4), tiny_zsl_model(), test)

    def test_batch_larger_than_table(self, zsl_data):
        with pytest.raises(DataError):
            train_zsl(TrainConfig(mode="zsl", batch_size=10_000), tiny_zsl_model(), zsl_data[0])

    def test_dimension_mismatch(self, zsl_data):
        cfg = ZslConfig(attribute_dim=7, fc1_hidden=8, feature_dim=5, fc3_hidden=6)
        with pytest.raises(DataError):
            train_zsl(TrainConfig(mode="zsl", batch_size=4), cfg, zsl_data[0])


class TestCheckpoint:
    def _state(self, seed=42):
        model = RelationNetwork(tiny_model(), seed=seed, dtype=np.float32)
        adam = AdamState(weight_decay=0.1, decay_names={"embed.0.conv.weight"})
        adam.init_moments(model.params)
        return model, adam

    def test_save_load_save_identical(self, tmp_path):
        model, adam = self._state()
        rng = train_rng(3)
        rng.random(5)
        save_checkpoint(tmp_path / "a.rnc", model, adam, 17, rng, {"note": "x"})
        state = load_checkpoint(tmp_path / "a.rnc")
        save_checkpoint(tmp_path / "b.rnc", state.model, state.adam, state.step, state.rng, state.extra)
        assert (tmp_path / "a.rnc").read_bytes() == (tmp_path / "b.rnc").read_bytes()
        assert state.rng.random() == rng.random()

    def test_fresh_models_with_same_seed_encode_identically(self):
        a, b = self._state(), self._state()
        assert encode_checkpoint(*a, 0, train_rng(0)) == encode_checkpoint(*b, 0, train_rng(0))

    def test_zsl_round_trip(self):
        model = ZslRelationNetwork(tiny_zsl_model(), seed=1, dtype=np.float32)
        adam = AdamState(decay_names=model.decay_names)
        adam.init_moments(model.params)
        state = decode_checkpoint(encode_checkpoint(model, adam, 3, train_rng(0)))
        assert isinstance(state.model, ZslRelationNetwork)
        assert state.adam.decay_names == model.decay_names

    def test_manifest_fields(self, tmp_path):
        model, adam = self._state()
        save_checkpoint(tmp_path / "c.rnc", model, adam, 5, train_rng(0))
        manifest = read_manifest(tmp_path / "c.rnc")
        assert manifest["step"] == 5 and manifest["model"]["kind"] == "fewshot"
        assert manifest["arrays"][0]["name"].startswith("param/")

    def test_truncated(self):
        data = encode_checkpoint(*self._state(), 0, train_rng(0))
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(data[:-4])
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(data[:10])

    def test_trailing_bytes(self):
        data = encode_checkpoint(*self._state(), 0, train_rng(0))
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(data + b"\0\0\0\0")

    def test_bad_magic_and_version(self):
        data = bytearray(encode_checkpoint(*self._state(), 0, train_rng(0)))
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"X" + bytes(data[1:]))
        struct.pack_into("<I", data, 8, 99)
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(data))

    def test_tampered_offset(self):
        data = encode_checkpoint(*self._state(), 0, train_rng(0))
        (mlen,) = struct.unpack_from("<Q", data, 12)
        manifest = json.loads(data[20:20 + mlen])
        manifest["arrays"][1]["offset"] += 4
        text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        forged = data[:12] + struct.pack("<Q", len(text)) + text + data[20 + mlen:]
        with pytest.raises(CheckpointError, match="tile"):
            decode_checkpoint(forged)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.rnc")
