import json

import numpy as np
import pytest
import scipy.sparse as sp

import fsgp.trainer as trainer
from fsgp.basis import build_basis
from fsgp.data import Dataset
from fsgp.errors import CheckpointError, NumericError
from fsgp.predict import evaluate
from fsgp.trainer import (OptimizerMoments, TrainConfig, TrainingAborted, adam_step,
                          init_state, load_checkpoint, save_checkpoint, train)

from _builders import random_dataset, random_state


def _small_config(**kw):
    base = dict(latents=2, inducing=4, rank=3, batch_size=5, neg_size=2, epochs=3,
                learning_rate=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def data():
    return random_dataset(12, 6, 4, np.random.default_rng(7))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(latents=0), dict(epochs=-1), dict(neg_size=0),
                                    dict(adam_beta1=1.0), dict(mode="dense"),
                                    dict(kernel="matern")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_roundtrip_and_unknown_keys(self):
        cfg = TrainConfig(mode="free-z", kernel="rbf")
        assert cfg.mode == "free_z" and cfg.kernel == "squared_exponential"
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"latnets": 3})

    def test_default_negatives(self):
        assert TrainConfig().resolved_neg_size(5) == 4
        assert TrainConfig().resolved_neg_size(10_000) == 2000


class TestInit:
    def test_bias_from_frequencies(self):
        x = sp.csr_matrix(np.ones((98, 2)))
        data = Dataset.from_label_lists(x, [[0]] * 49 + [[]] * 49, 2)
        b = trainer._label_bias(data)
        assert b[0] == pytest.approx(0.0, abs=1e-12)
        assert b[1] == pytest.approx(np.log(0.01 / 0.99), abs=1e-12)
        assert b[1] == pytest.approx(-4.595, abs=1e-3)

    @pytest.mark.parametrize("kernel, mode", [("linear", "subspace"), ("se", "free_z")])
    def test_shapes_and_determinism(self, data, kernel, mode):
        cfg = _small_config(kernel=kernel, mode=mode)
        basis = build_basis(data.features, cfg.rank)
        a = init_state(cfg, data, basis, np.random.default_rng(1))
        b = init_state(cfg, data, basis, np.random.default_rng(1))
        for k, v in a.params().items():
            np.testing.assert_array_equal(v, b.params()[k])
        np.testing.assert_array_equal(a.factors.mu, 0)
        np.testing.assert_array_equal(a.factors.log_sigma, 0)
        assert a.phi.shape == (4, 2) and a.mode == mode
        if kernel == "se":
            assert a.kernel.lengthscale > 0

    def test_too_many_inducing(self, data):
        cfg = _small_config(inducing=20)
        with pytest.raises(ValueError):
            init_state(cfg, data, build_basis(data.features, 3), np.random.default_rng(0))


class TestAdam:
    def _setup(self, rng):
        d = random_dataset(5, 4, 3, rng)
        state, _ = random_state(d, 3, 2, 3, "linear", "free_z", rng)
        return state, OptimizerMoments.zeros_like(state.params())

    def test_zero_gradient(self, rng):
        state, mom = self._setup(rng)
        zero = {k: np.zeros_like(v) for k, v in state.params().items()}
        new, _ = adam_step(state, zero, mom, TrainConfig())
        for k, v in state.params().items():
            np.testing.assert_array_equal(new.params()[k], v)

    def test_first_step_is_lr_sign(self, rng):
        state, mom = self._setup(rng)
        # |g| >= 1 keeps the eps contribution below 1e-11
        g = {k: rng.choice([-1.0, 1.0], size=np.shape(v)) * (1 + rng.random(np.shape(v)))
             for k, v in state.params().items()}
        cfg = TrainConfig(learning_rate=1e-3)
        new, mom1 = adam_step(state, g, mom, cfg)
        assert mom1.step == 1
        for k, v in state.params().items():
            np.testing.assert_allclose(new.params()[k] - v, 1e-3 * np.sign(g[k]), atol=1e-9)

    def test_two_step_recurrence(self, rng):
        state, mom = self._setup(rng)
        cfg = TrainConfig(learning_rate=0.1)
        g1 = {k: np.full(np.shape(v), 2.0) for k, v in state.params().items()}
        g2 = {k: np.full(np.shape(v), -1.0) for k, v in state.params().items()}
        s1, m1 = adam_step(state, g1, mom, cfg)
        s2, _ = adam_step(s1, g2, m1, cfg)
        m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
        v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
        step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        np.testing.assert_allclose(s2.phi - s1.phi, step, rtol=1e-12)

    def test_non_finite_update(self, rng):
        state, mom = self._setup(rng)
        g = {k: np.zeros_like(v) for k, v in state.params().items()}
        g["phi"] = np.full_like(g["phi"], np.nan)
        with pytest.raises(NumericError, match="phi"):
            adam_step(state, g, mom, TrainConfig())


class TestTrain:
    def test_zero_epochs(self, data):
        cfg = _small_config(epochs=0)
        state, hist = train(cfg, data)
        assert hist == []
        init = init_state(cfg, data, build_basis(data.features, 3, True, 0),
                          np.random.default_rng(0))
        for k, v in init.params().items():
            np.testing.assert_array_equal(state.params()[k], v)

    @pytest.mark.parametrize("mode", ["subspace", "free_z"])
    def test_same_seed_bitwise(self, data, mode):
        cfg = _small_config(mode=mode)
        _, h1 = train(cfg, data)
        _, h2 = train(cfg, data)
        assert h1 == h2 and len(h1) == 3

    def test_separable_toy(self):
        x = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 1.0]]))
        data = Dataset.from_label_lists(x, [[0], [1]], 2)
        cfg = TrainConfig(latents=1, inducing=2, rank=2, batch_size=2, neg_size=1,
                          epochs=200, learning_rate=5e-2, seed=0)
        state, hist = train(cfg, data)
        assert hist[-1] > hist[0]
        assert evaluate(state, data, ks=(1,)).precision[1] == 1.0

    def test_checkpoint_roundtrip(self, data, tmp_path):
        cfg = _small_config()
        path = tmp_path / "ck.npz"
        state, hist = train(cfg, data, checkpoint_path=path)
        ck = load_checkpoint(path)
        assert ck.epoch == 3 and ck.history == hist and ck.config == cfg.to_dict()
        for k, v in state.params().items():
            np.testing.assert_array_equal(ck.state.params()[k], v)
        np.testing.assert_array_equal(ck.state.rep.basis.x_tilde, state.rep.basis.x_tilde)

    def test_corrupt_checkpoints(self, data, tmp_path):
        cfg = _small_config(epochs=1)
        path = tmp_path / "ck.npz"
        state, _ = train(cfg, data, checkpoint_path=path)
        raw = path.read_bytes()
        (tmp_path / "cut.npz").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "cut.npz")
        save_checkpoint(tmp_path / "v.npz", state)
        with np.load(tmp_path / "v.npz") as f:
            files = dict(f)
        meta = json.loads(str(files["meta"]))
        meta["format_version"] = 99
        files["meta"] = np.array(json.dumps(meta))
        np.savez(tmp_path / "v.npz", **files)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.npz")

    @pytest.mark.parametrize("mode", ["subspace", "free_z"])
    def test_resume_matches_uninterrupted(self, data, tmp_path, mode):
        full_state, full_hist = train(_small_config(epochs=4, mode=mode), data)
        path = tmp_path / "half.npz"
        train(_small_config(epochs=2, mode=mode), data, checkpoint_path=path)
        state, hist = train(_small_config(epochs=4, mode=mode), data, resume=path)
        assert hist == full_hist
        for k, v in full_state.params().items():
            np.testing.assert_array_equal(state.params()[k], v)

    def test_log_records(self, data, tmp_path):
        log = tmp_path / "log.jsonl"
        train(_small_config(epochs=2), data, log_path=log)
        recs = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(recs) == 2 * 3  # ceil(12 / 5) steps per epoch
        assert [r["step"] for r in recs] == list(range(1, 7))
        assert set(recs[0]) == {"epoch", "step", "bound", "wall_time"}

    def test_aborts_after_repeated_failures(self, data, tmp_path, monkeypatch):
        def broken(*args, **kwargs):
            raise NumericError("forced", "K_Z")

        monkeypatch.setattr(trainer, "gradient", broken)
        path = tmp_path / "ck.npz"
        with pytest.raises(TrainingAborted) as info:
            train(_small_config(max_failures=2), data, checkpoint_path=path)
        assert info.value.checkpoint == path
        assert load_checkpoint(path).epoch == 0
