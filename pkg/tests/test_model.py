import struct

import numpy as np
import pytest

from stbr import tensor as tn
from stbr.errors import CheckpointError, CompatibilityError, ConfigError, ContractError
from stbr.model import (
    EncoderConfig, STBRModel, checkpoint_bytes, checkpoint_from_bytes, encode_online, encode_target, infer,
    load_checkpoint, predict, save_checkpoint,
)

TINY = EncoderConfig(latent_dim=4, repr_dim=3, n_blocks=2, predictor_hidden=5)


def series(rng, L=32):
    return rng.standard_normal(L), np.ones(L, dtype=bool)


class TestConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.latent_dim, cfg.repr_dim, cfg.n_blocks, cfg.kernel_size, cfg.predictor_hidden) == (64, 64, 10, 3, 128)
        assert [cfg.dilation(b) for b in range(4)] == [1, 2, 4, 8]

    def test_receptive_field(self):
        assert EncoderConfig().receptive_field == 4093
        assert EncoderConfig(n_blocks=6).receptive_field == 253

    @pytest.mark.parametrize("kw", [{"latent_dim": 0}, {"input_dim": 2}, {"mask_mode": "x"}, {"projection": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            EncoderConfig(**kw)

    def test_hash_depends_on_fields(self):
        assert EncoderConfig().hash() != EncoderConfig(n_blocks=2).hash()
        assert EncoderConfig().hash() == EncoderConfig().hash()


class TestEncode:
    def test_shape(self, rng):
        x, obs = series(rng, 17)
        assert encode_online(STBRModel(TINY), x, obs).shape == (17, 3)
        assert encode_online(STBRModel(TINY), np.stack([x, x]), np.stack([obs, obs])).shape == (2, 17, 3)

    def test_length_mismatch(self, rng):
        x, _ = series(rng, 10)
        with pytest.raises(ContractError):
            encode_online(STBRModel(TINY), x, np.ones(9, dtype=bool))
        with pytest.raises(ContractError):
            encode_online(STBRModel(TINY), x, np.ones(10, dtype=bool), np.zeros(8, dtype=bool))

    def test_all_masked_equals_zero_latents(self, rng):
        model = STBRModel(TINY, seed=3)
        x, obs = series(rng)
        full = encode_online(model, x, obs, np.ones(32, dtype=bool)).data
        other = encode_online(model, rng.standard_normal(32) * 50, obs, np.ones(32, dtype=bool)).data
        assert np.all(np.isfinite(full))
        np.testing.assert_array_equal(full, other)
        # every row sees an all-zero latent history, so only the zero-padding boundary varies the output
        assert np.allclose(full[-1], full[-2])

    @pytest.mark.parametrize("mode", ["latent", "raw"])
    def test_mask_independence(self, rng, mode):
        model = STBRModel(EncoderConfig(latent_dim=4, repr_dim=3, n_blocks=3, predictor_hidden=5, mask_mode=mode))
        x, obs = series(rng, 40)
        aug = np.zeros(40, dtype=bool)
        aug[10:15] = aug[30:33] = True
        obs[20] = False
        base = encode_online(model, x, obs, aug).data
        x2 = x.copy()
        x2[aug | ~obs] = rng.standard_normal((aug | ~obs).sum()) * 100
        np.testing.assert_array_equal(encode_online(model, x2, obs, aug).data, base)

    def test_full_encoder_causality(self, rng):
        cfg = EncoderConfig(latent_dim=4, repr_dim=4, n_blocks=10, kernel_size=3, predictor_hidden=4)
        model = STBRModel(cfg, seed=1)
        L = 120
        x, obs = series(rng, L)
        base = infer(model, x, obs)
        for t in rng.choice(np.arange(1, L), size=10, replace=False):
            x2 = x.copy()
            x2[t] += rng.standard_normal() * 10
            out = infer(model, x2, obs)
            assert np.array_equal(out[:t], base[:t])
            assert not np.array_equal(out[t], base[t])

    def test_target_equals_online_at_copy(self, rng):
        model = STBRModel(TINY, seed=2)
        x, obs = series(rng)
        np.testing.assert_array_equal(encode_target(model, x, obs).data, encode_online(model, x, obs).data)

    def test_target_detached(self, rng):
        model = STBRModel(TINY)
        x, obs = series(rng)
        with tn.Tape() as tape:
            r = encode_target(model, x, obs)
            y = encode_online(model, x, obs)
            loss = tn.mean(tn.sq_norm(tn.add(y, r.data)))
        tn.backward(loss, tape)
        assert not r.requires_grad
        assert all(np.all(p.grad == 0) for p in model.target_params())

    def test_target_finite_fuzz(self, rng):
        model = STBRModel(TINY, seed=5)
        for _ in range(100):
            x = rng.uniform(-5, 5, 24)
            obs = rng.random(24) > 0.3
            assert np.all(np.isfinite(encode_target(model, x, obs).data))

    def test_predict_connectivity(self, rng):
        model = STBRModel(TINY)
        x, obs = series(rng)
        with tn.Tape() as tape:
            y = predict(model, encode_online(model, x, obs))
            loss = tn.mean(tn.sq_norm(y))
        assert y.shape == (32, 3)
        tn.backward(loss, tape)
        for prefix in ("pred.", "block0.", "proj.", "head."):
            assert any(np.any(p.grad != 0) for n, p in model.online.items() if n.startswith(prefix)), prefix


class TestParameterSets:
    def test_no_shared_objects(self):
        model = STBRModel(TINY)
        online = {id(p) for p in model.online_params()}
        assert not online & {id(p) for p in model.target_params()}
        assert not any(np.shares_memory(p.data, q.data) for p in model.online_params() for q in model.target_params())

    def test_target_mirrors_encoder(self):
        model = STBRModel(TINY)
        assert set(model.target) == {n for n in model.online if not n.startswith("pred.")}
        for n, p in model.target.items():
            assert p.shape == model.online[n].shape and not p.requires_grad

    def test_shared_projection(self):
        model = STBRModel(EncoderConfig(latent_dim=4, repr_dim=3, n_blocks=1, predictor_hidden=5, projection="shared"))
        assert "proj.W" not in model.target
        assert model.target_view()["proj.W"] is model.online["proj.W"]

    def test_unique_ids(self):
        model = STBRModel(TINY)
        ids = [p.id for p in model.online_params() + model.target_params()]
        assert len(ids) == len(set(ids))

    def test_seeded_init(self):
        a, b = STBRModel(TINY, seed=4), STBRModel(TINY, seed=4)
        assert all(a.online[n].data.tobytes() == b.online[n].data.tobytes() for n in a.online)


class TestCheckpoint:
    def model(self):
        m = STBRModel(TINY, seed=9)
        m.step = 17
        for p in m.target_params():
            p.data[...] += 0.5  # make phi differ from theta
        return m

    def test_round_trip_bytes(self, tmp_path):
        m = self.model()
        save_checkpoint(m, tmp_path / "a.stbr")
        back = load_checkpoint(tmp_path / "a.stbr")
        save_checkpoint(back, tmp_path / "b.stbr")
        assert (tmp_path / "a.stbr").read_bytes() == (tmp_path / "b.stbr").read_bytes()
        assert back.step == 17 and back.seed == 9
        for n in m.online:
            assert back.online[n].data.tobytes() == m.online[n].data.tobytes()
        for n in m.target:
            assert back.target[n].data.tobytes() == m.target[n].data.tobytes()

    def test_truncated(self):
        buf = checkpoint_bytes(self.model())
        for cut in (3, 8, 40, len(buf) // 2, len(buf) - 1):
            with pytest.raises(CheckpointError):
                checkpoint_from_bytes(buf[:cut])

    def test_bad_magic(self):
        buf = checkpoint_bytes(self.model())
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_from_bytes(b"XXXX" + buf[4:])

    def test_version(self):
        buf = checkpoint_bytes(self.model())
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_from_bytes(buf[:4] + struct.pack("<H", 99) + buf[6:])

    def test_flipped_byte(self):
        buf = bytearray(checkpoint_bytes(self.model()))
        buf[len(buf) // 2] ^= 0xFF
        with pytest.raises(CheckpointError):
            checkpoint_from_bytes(bytes(buf))

    def test_config_guard(self):
        desk = EncoderConfig(latent_dim=4, repr_dim=3, n_blocks=2, predictor_hidden=5)
        buf = checkpoint_bytes(STBRModel(desk))
        assert checkpoint_from_bytes(buf, desk).config == desk
        with pytest.raises(CompatibilityError):
            checkpoint_from_bytes(buf, EncoderConfig(latent_dim=4, repr_dim=3, n_blocks=3, predictor_hidden=5))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.stbr")
