import numpy as np
import pytest

from cisosdm import models, numerics as nm
from cisosdm.encoding import STATE_UNKNOWN, assign_states
from cisosdm.features import fit_maxent
from fdcheck import check_gradients


def toy_spec(family, **kw):
    defaults = dict(
        family=family,
        n_species=4,
        n_env=5,
        hidden_dim=8,
        heads=2,
        transformer_layers=2,
        n_b=4,
        dropout=0.0,
    )
    defaults.update(kw)
    return models.ModelSpec(**defaults)


def toy_batch(seed=0, n=3, n_species=4, n_env=5, n_b=4):
    rng = np.random.default_rng(seed)
    env = rng.normal(size=(n, n_env))
    targets = rng.choice([0.0, 0.2, 0.7, 1.0], size=(n, n_species))
    available = np.ones((n, n_species), bool)
    known = rng.random((n, n_species)) < 0.5
    codes, rates = assign_states(targets, available, known, n_b)
    return env, targets, available, known, codes, rates


class TestSpecValidation:
    def test_unknown_family(self):
        with pytest.raises(ValueError, match="family"):
            toy_spec("gbm")

    def test_dim_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            toy_spec("ciso", hidden_dim=10, heads=4)

    def test_roundtrip_dict(self):
        spec = toy_spec("mlp", mlp_hidden=(16, 16, 16))
        assert models.ModelSpec.from_dict(spec.to_dict()) == spec


class TestForwardContracts:
    def test_linear_zero_weights_give_half(self):
        m = models.build_model(toy_spec("linear"), seed=0)
        for p in m.params.values():
            p.values[:] = 0.0
        out = m.forward(np.zeros((2, 5))).values
        assert np.allclose(out, 0.5)

    def test_linear_one_hot_row_recovers_variable(self):
        m = models.build_model(toy_spec("linear"), seed=0)
        m.params["out.w"].values[:] = 0.0
        m.params["out.b"].values[:] = 0.0
        m.params["out.w"].values[2, 0] = 1.0
        env = np.zeros((1, 5))
        env[0, 2] = 1.3
        out = m.forward(env).values
        assert out[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-1.3)))
        assert np.allclose(out[0, 1:], 0.5)

    def test_mlp_zero_weights_give_half(self):
        m = models.build_model(toy_spec("mlp"), seed=0)
        for p in m.params.values():
            p.values[:] = 0.0
        assert np.allclose(m.forward(np.ones((2, 5))).values, 0.5)

    def test_mlp_depth_variants_constructible(self):
        for depth in (3, 5, 6, 7):
            widths = models.mlp_widths_for_depth(depth, 8)
            m = models.build_model(toy_spec("mlp", mlp_hidden=widths), seed=0)
            assert len(m.trunk) == depth - 1
            assert m.forward(np.zeros((1, 5))).shape == (1, 4)

    def test_mlppp_input_width(self):
        spec = toy_spec("mlp++", n_b=4)
        m = models.build_model(spec, seed=0)
        assert m.params["trunk0.w"].shape[0] == 5 + 4 * 6

    def test_mlppp_all_unknown_appends_constant_block(self):
        m = models.build_model(toy_spec("mlp++"), seed=0)
        env = np.random.default_rng(0).normal(size=(2, 5))
        default = m.forward(env).values
        codes = np.full((2, 4), STATE_UNKNOWN)
        explicit = m.forward(env, codes, np.zeros((2, 4))).values
        assert np.array_equal(default, explicit)

    def test_mlppp_state_flip_changes_fixed_block(self):
        m = models.build_model(toy_spec("mlp++"), seed=0)
        codes = np.full((1, 4), STATE_UNKNOWN)
        a = m._input(np.zeros((1, 5)), codes, None)
        codes2 = codes.copy()
        codes2[0, 1] = 3  # absent -> present bin 2
        b = m._input(np.zeros((1, 5)), codes2, None)
        changed = np.flatnonzero(a != b)
        width = m.state_width
        assert changed.min() >= 5 + 1 * width and changed.max() < 5 + 2 * width

    def test_maxent_runs_on_expanded_features(self):
        rng = np.random.default_rng(0)
        cfg = fit_maxent(rng.normal(size=(30, 5)))
        m = models.build_model(toy_spec("maxent"), seed=0, maxent_config=cfg)
        out = m.forward(rng.normal(size=(3, 5)))
        assert out.shape == (3, 4)
        assert np.all((out.values > 0) & (out.values < 1))

    def test_maxent_requires_config(self):
        with pytest.raises(ValueError, match="MaxentConfig"):
            models.build_model(toy_spec("maxent"), seed=0)

    def test_maxent_zero_weights_give_half(self):
        rng = np.random.default_rng(0)
        cfg = fit_maxent(rng.normal(size=(30, 5)))
        m = models.build_model(toy_spec("maxent"), seed=0, maxent_config=cfg)
        for p in m.params.values():
            p.values[:] = 0.0
        assert np.allclose(m.forward(rng.normal(size=(2, 5))).values, 0.5)


class TestCISO:
    def test_prediction_shape_and_range(self):
        m = models.build_model(toy_spec("ciso"), seed=0)
        env, *_, codes, rates = toy_batch()
        out = m.forward(env, codes, rates).values
        assert out.shape == (3, 4)
        assert np.all((out > 0) & (out < 1))

    def test_species_permutation_equivariance(self):
        m = models.build_model(toy_spec("ciso"), seed=1)
        env, *_, codes, rates = toy_batch(seed=2)
        base = m.forward(env, codes, rates).values
        perm = np.array([2, 0, 3, 1])
        m.tables.species.values = m.tables.species.values[perm]
        m.readout_w.values = m.readout_w.values[perm]
        m.readout_b.values = m.readout_b.values[perm]
        permuted = m.forward(env, codes[:, perm], rates[:, perm]).values
        assert np.allclose(permuted, base[:, perm], atol=1e-12)

    def test_all_unknown_ignores_state_vectors(self):
        # Conditioning locality: bin and absent vectors are never looked up.
        m = models.build_model(toy_spec("ciso"), seed=3)
        env, *_ = toy_batch(seed=4)
        base = m.forward(env).values
        rows = m.tables.state.params["state_rows"].values
        rows[1:] = np.random.default_rng(5).normal(size=rows[1:].shape)
        assert np.array_equal(m.forward(env).values, base)

    def test_attention_rows_sum_to_one(self):
        m = models.build_model(toy_spec("ciso"), seed=6)
        env, *_, codes, rates = toy_batch(seed=7)
        tokens = nm.add(m.tables.species, m.tables.state.encode(codes, rates))
        z = nm.reshape(nm.Tensor(np.zeros((3, 8))), (3, 1, 8))
        x = nm.concat([z, tokens], axis=1)
        for blk in m.blocks:
            w = blk.attention_weights(x, 3, 5).values
            assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-6
            x = blk.forward(x, False, None)

    def test_unconditioned_vs_empty_condition_identical(self):
        m = models.build_model(toy_spec("ciso"), seed=8)
        env, targets, available, _, _, _ = toy_batch(seed=9)
        none_known = np.zeros_like(available)
        codes, rates = assign_states(targets, available, none_known, 4)
        assert np.array_equal(m.forward(env).values, m.forward(env, codes, rates).values)

    @pytest.mark.parametrize("mode", ["discrete", "linear", "periodic"])
    def test_encoding_modes_run(self, mode):
        m = models.build_model(toy_spec("ciso", encoding=mode), seed=10)
        env, *_, codes, rates = toy_batch(seed=11)
        assert m.forward(env, codes, rates).shape == (3, 4)


class TestGradients:
    @pytest.mark.parametrize("family", ["linear", "maxent", "mlp", "mlp++", "ciso"])
    def test_family_matches_finite_differences(self, family):
        rng = np.random.default_rng(12)
        maxent_config = fit_maxent(rng.normal(size=(25, 5))) if family == "maxent" else None
        spec = toy_spec(family, hidden_dim=6, heads=2)
        m = models.build_model(spec, seed=13, maxent_config=maxent_config)
        env, targets, available, known, codes, rates = toy_batch(seed=14, n=2)
        mask = available & ~known

        def loss():
            pred = m.forward(env, codes, rates) if spec.uses_states else m.forward(env)
            return nm.bce_masked(pred, targets, mask)

        check_gradients(loss, m.params)


class TestParameterCounts:
    def test_mlp_parameter_count_near_reference(self):
        spec = models.ModelSpec(family="mlp", n_species=3951, n_env=27, hidden_dim=256)
        count = models.build_model(spec, seed=0).param_count()
        assert abs(count - 1.1e6) / 1.1e6 < 0.05

    def test_ciso_parameter_count_near_reference(self):
        spec = models.ModelSpec(family="ciso", n_species=3951, n_env=27, hidden_dim=256, n_b=1)
        count = models.build_model(spec, seed=0).param_count()
        assert abs(count - 7.1e6) / 7.1e6 < 0.05


class TestCheckpoint:
    def make_trained(self, family="ciso", seed=0):
        from cisosdm.dataio import fit_norm

        rng = np.random.default_rng(seed)
        maxent_config = fit_maxent(rng.normal(size=(30, 5))) if family == "maxent" else None
        spec = toy_spec(family)
        model = models.build_model(spec, seed=seed, maxent_config=maxent_config)
        norm = fit_norm(rng.normal(size=(20, 5)))
        return models.TrainedModel(
            model=model,
            roster=[f"sp{i}" for i in range(4)],
            norm=norm,
            maxent_config=maxent_config,
            meta={"selection_epoch": 3},
        )

    @pytest.mark.parametrize("family", ["linear", "maxent", "mlp", "mlp++", "ciso"])
    def test_roundtrip_preserves_everything(self, tmp_path, family):
        tm = self.make_trained(family)
        path = str(tmp_path / "model.ckpt")
        models.save_checkpoint(tm, path)
        back = models.load_checkpoint(path)
        assert back.roster == tm.roster
        assert back.model.spec == tm.model.spec
        assert back.meta["selection_epoch"] == 3
        for name, p in tm.model.params.items():
            assert np.array_equal(back.model.params[name].values, p.values)
        env = np.random.default_rng(1).normal(size=(2, 5))
        if tm.model.spec.uses_states:
            codes = np.zeros((2, 4), dtype=np.int64)
            rates = np.zeros((2, 4))
            assert np.array_equal(
                back.model.forward(env, codes, rates).values, tm.model.forward(env, codes, rates).values
            )
        else:
            assert np.array_equal(back.model.forward(env).values, tm.model.forward(env).values)

    def test_save_is_deterministic(self, tmp_path):
        tm = self.make_trained()
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        models.save_checkpoint(tm, a)
        models.save_checkpoint(tm, b)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not a checkpoint"):
            models.load_checkpoint(str(path))
