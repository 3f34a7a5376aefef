"""Tests for universal and per-image perturbation generation.

The core oracle is a hand-weighted linear model: for a linear classifier the
optimal L-infinity-bounded perturbation is a known box vertex, eps * sign of
the logit-difference direction, so the optimizer's output can be checked
exactly.
"""

import numpy as np
import pytest

from freqlens import autodiff as ad
from freqlens.attack import (
    AttackConfig,
    Perturbation,
    apply_perturbation,
    fooling_ratio,
    frequency_sweep,
    generate_idp,
    generate_idp_batch,
    generate_uap,
    load_perturbation,
    logit_cosine_stats,
    perturbation_input,
    regularization_sweep,
    save_perturbation,
    targeted_fooling_ratio,
)
from freqlens.autodiff import Tensor
from freqlens.data import DataError, Dataset
from freqlens.fourier import ALL_PASS, FreqFilterSpec, filter_array
from freqlens.models import Dense, Model, predict


@pytest.fixture(autouse=True)
def clean_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


# direction separating the two classes of the toy linear model
D = np.array([2.0, -2.0, 1.0, -3.0], dtype=np.float32)


def linear_model(bias0: float) -> Model:
    """1x2x2 input -> 2 logits. logit1 - logit0 = x . D - bias0, so the
    optimal eps-ball attack toward class 1 is eps * sign(D) exactly."""
    layer = Dense("fc", 4, 2, np.random.default_rng(0))
    w = np.zeros((4, 2), dtype=np.float32)
    w[:, 1] = D
    layer.w = Tensor(w, requires_grad=True)
    layer.b = Tensor(np.array([bias0, 0.0], dtype=np.float32), requires_grad=True)
    return Model("toy-linear", [(layer, None)], {"num_classes": "2"})


def margin_images() -> np.ndarray:
    """Three images with x . D in {0.45, 0.55, 0.65}: with bias0 = 1 the clean
    margin is small enough that the optimal attack flips all of them."""
    xs = []
    for a in (0.85, 0.90, 0.95):
        xs.append(np.array([a, 0.5, 0.5, 0.25], dtype=np.float32).reshape(1, 2, 2))
    return np.stack(xs)


def toy_dataset(images: np.ndarray) -> Dataset:
    return Dataset(images, np.zeros(len(images), dtype=np.int64), ["a", "b"])


class TestConfig:
    def test_defaults_valid(self):
        cfg = AttackConfig()
        assert cfg.eps == pytest.approx(10.0 / 255.0)
        assert cfg.target is None
        assert cfg.filter == ALL_PASS

    @pytest.mark.parametrize("kw", [
        {"eps": 0.0}, {"eps": -0.1}, {"eps": 1.5},
        {"iterations": 0}, {"batch_size": 0}, {"lr": 0.0}, {"lr": -1.0},
        {"reg_weight": -0.01}, {"target": -1},
    ])
    def test_bad_values_rejected(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(**kw)

    def test_digest_tracks_fields(self):
        base = AttackConfig(seed=3).digest()
        assert len(base) == 16
        assert AttackConfig(seed=3).digest() == base
        assert AttackConfig(seed=4).digest() != base
        assert AttackConfig(seed=3, eps=0.05).digest() != base
        assert AttackConfig(seed=3, filter=FreqFilterSpec("low_pass", 8)).digest() != base


class TestPerturbationContainer:
    def test_must_be_3d(self):
        with pytest.raises(DataError):
            Perturbation(np.zeros((2, 2)), 0.1, ALL_PASS, {})

    def test_eps_bound_enforced(self):
        with pytest.raises(DataError):
            Perturbation(np.full((1, 2, 2), 0.2, dtype=np.float32), 0.1, ALL_PASS, {})

    def test_filtered_applies_mask(self):
        v = np.random.default_rng(0).uniform(-0.1, 0.1, size=(1, 8, 8)).astype(np.float32)
        pert = Perturbation(v, 0.1, FreqFilterSpec("low_pass", 0), {})
        assert np.abs(pert.filtered()).max() == 0.0

    def test_all_pass_filtered_is_identity(self):
        v = np.random.default_rng(1).uniform(-0.1, 0.1, size=(3, 4, 4)).astype(np.float32)
        pert = Perturbation(v, 0.1, ALL_PASS, {})
        np.testing.assert_allclose(pert.filtered(), v, atol=1e-6)


class TestHelpers:
    def test_perturbation_input_affine(self):
        v = np.array([[[0.1, -0.1], [0.0, 0.05]]], dtype=np.float32)
        out = perturbation_input(v, 0.1)
        np.testing.assert_allclose(
            out, np.array([[[1.0, 0.0], [0.5, 0.75]]], dtype=np.float32), atol=1e-6)

    def test_perturbation_input_needs_positive_eps(self):
        with pytest.raises(ValueError):
            perturbation_input(np.zeros((1, 2, 2)), 0.0)

    def test_apply_perturbation_clips(self):
        imgs = np.full((2, 1, 2, 2), 0.97, dtype=np.float32)
        pert = Perturbation(np.full((1, 2, 2), 0.1, dtype=np.float32), 0.1, ALL_PASS, {})
        out = apply_perturbation(imgs, pert)
        assert out.max() == 1.0
        imgs = np.full((2, 1, 2, 2), 0.02, dtype=np.float32)
        pert = Perturbation(np.full((1, 2, 2), -0.1, dtype=np.float32), 0.1, ALL_PASS, {})
        assert apply_perturbation(imgs, pert).min() == 0.0


class TestLinearOracle:
    """Closed-form checks: on a linear model the best attack is a box vertex."""

    def test_untargeted_uap_hits_optimal_vertex(self):
        model = linear_model(bias0=3.0)   # every clean prediction is class 0
        ds = toy_dataset(margin_images())
        cfg = AttackConfig(eps=0.1, iterations=150, batch_size=4, lr=0.05, seed=0)
        pert = generate_uap(model, ds, cfg)
        want = 0.1 * np.sign(D).reshape(1, 2, 2)
        np.testing.assert_allclose(pert.v, want, atol=1e-6)

    def test_targeted_uap_hits_optimal_vertex(self):
        model = linear_model(bias0=3.0)
        ds = toy_dataset(margin_images())
        cfg = AttackConfig(eps=0.1, iterations=150, batch_size=4, lr=0.05,
                           target=1, seed=0)
        pert = generate_uap(model, ds, cfg)
        want = 0.1 * np.sign(D).reshape(1, 2, 2)
        np.testing.assert_allclose(pert.v, want, atol=1e-6)
        assert pert.meta["mode"] == "targeted"
        assert pert.meta["target"] == "1"

    def test_idp_matches_linear_optimum(self):
        model = linear_model(bias0=3.0)
        img = margin_images()[0]
        cfg = AttackConfig(eps=0.1, iterations=150, batch_size=1, lr=0.05, seed=0)
        pert = generate_idp(model, img, cfg)
        np.testing.assert_allclose(pert.v, 0.1 * np.sign(D).reshape(1, 2, 2), atol=1e-6)
        assert pert.meta["kind"] == "idp"

    def test_idp_batch_rows_are_independent_optima(self):
        model = linear_model(bias0=3.0)
        imgs = margin_images()
        cfg = AttackConfig(eps=0.1, iterations=150, batch_size=3, lr=0.05, seed=0)
        vs = generate_idp_batch(model, imgs, cfg)
        want = 0.1 * np.sign(D).reshape(1, 2, 2)
        for i in range(len(imgs)):
            np.testing.assert_allclose(vs[i], want, atol=1e-6)

    def test_fooling_counts_flips_against_clean_predictions(self):
        # margin 0.45..0.65 < boost 0.8 at the vertex: every image flips
        model = linear_model(bias0=1.0)
        imgs = margin_images()
        assert (predict(model, imgs) == 0).all()
        pert = Perturbation(0.1 * np.sign(D).reshape(1, 2, 2).astype(np.float32),
                            0.1, ALL_PASS, {})
        assert fooling_ratio(model, toy_dataset(imgs), pert) == 1.0
        # margin > 0.8 everywhere: nothing flips even at the optimum
        model_far = linear_model(bias0=3.0)
        assert fooling_ratio(model_far, toy_dataset(imgs), pert) == 0.0

    def test_targeted_ratio_excludes_existing_target(self):
        model = linear_model(bias0=1.0)
        imgs = margin_images()
        pert = Perturbation(0.1 * np.sign(D).reshape(1, 2, 2).astype(np.float32),
                            0.1, ALL_PASS, {})
        assert targeted_fooling_ratio(model, toy_dataset(imgs), pert, target=1) == 1.0
        # every clean prediction is already class 0
        with pytest.raises(DataError):
            targeted_fooling_ratio(model, toy_dataset(imgs), pert, target=0)


class TestBandLimitedAttack:
    def test_low_pass_uap_stays_in_band(self):
        rng = np.random.default_rng(5)
        imgs = rng.uniform(0.3, 0.7, size=(6, 1, 8, 8)).astype(np.float32)
        layer = Dense("fc", 64, 2, np.random.default_rng(7))
        model = Model("toy-wide", [(layer, None)], {"num_classes": "2"})
        spec = FreqFilterSpec("low_pass", 2)
        cfg = AttackConfig(eps=0.1, iterations=40, batch_size=4, lr=0.05,
                           filter=spec, seed=1)
        pert = generate_uap(model, toy_dataset(imgs), cfg)
        hp_leak = filter_array(pert.filtered(), FreqFilterSpec("high_pass", 2))
        assert np.abs(hp_leak).max() < 1e-6
        # the raw variable is NOT band-limited (Adam's per-element moment
        # scaling is a nonlinear spatial op), only the filtered view is
        assert np.abs(filter_array(pert.v, FreqFilterSpec("high_pass", 2))).max() > 1e-4

    def test_empty_band_gives_null_attack(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        cfg = AttackConfig(eps=0.1, iterations=20, batch_size=4, lr=0.05,
                           filter=FreqFilterSpec("low_pass", 0), seed=0)
        pert = generate_uap(model, ds, cfg)
        assert np.abs(pert.filtered()).max() == 0.0
        assert fooling_ratio(model, ds, pert) == 0.0


class TestDeterminismAndErrors:
    def test_same_seed_same_bits(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        cfg = AttackConfig(eps=0.1, iterations=5, batch_size=2, lr=0.02, seed=9)
        v1 = generate_uap(model, ds, cfg).v
        v2 = generate_uap(model, ds, cfg).v
        assert np.array_equal(v1, v2)

    def test_different_seed_different_path(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        mk = lambda s: AttackConfig(eps=0.1, iterations=5, batch_size=2, lr=0.02, seed=s)
        v1 = generate_uap(model, ds, mk(0)).v
        v2 = generate_uap(model, ds, mk(1)).v
        assert not np.array_equal(v1, v2)

    def test_model_grads_restored_after_attack(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        assert all(p.requires_grad for p in model.params().values())
        generate_uap(model, ds, AttackConfig(iterations=2, batch_size=2, seed=0))
        assert all(p.requires_grad for p in model.params().values())

    def test_empty_train_rejected(self):
        model = linear_model(bias0=1.0)
        empty = Dataset(np.zeros((0, 1, 2, 2), dtype=np.float32),
                        np.zeros(0, dtype=np.int64), ["a", "b"])
        with pytest.raises(DataError):
            generate_uap(model, empty, AttackConfig(iterations=2, seed=0))

    def test_target_out_of_range_rejected(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        with pytest.raises(ValueError):
            generate_uap(model, ds, AttackConfig(iterations=2, target=5, seed=0))

    def test_idp_batch_rejects_target_and_bad_shape(self):
        model = linear_model(bias0=1.0)
        with pytest.raises(ValueError):
            generate_idp_batch(model, margin_images(),
                               AttackConfig(iterations=2, target=1, seed=0))
        with pytest.raises(DataError):
            generate_idp_batch(model, margin_images()[0],
                               AttackConfig(iterations=2, seed=0))

    def test_fooling_ratio_rejects_empty(self):
        model = linear_model(bias0=1.0)
        pert = Perturbation(np.zeros((1, 2, 2), dtype=np.float32), 0.1, ALL_PASS, {})
        with pytest.raises(DataError):
            fooling_ratio(model, np.zeros((0, 1, 2, 2), dtype=np.float32), pert)


class TestSweeps:
    def test_frequency_sweep_rows_and_null_band(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        cfg = AttackConfig(eps=0.1, iterations=30, batch_size=4, lr=0.05, seed=0)
        rows = frequency_sweep(model, ds, ds, cfg, "low_pass", [0, 4])
        assert [r["bw"] for r in rows] == [0, 4]
        assert rows[0]["fooling"] == 0.0          # bw 0 passes nothing
        assert rows[1]["fooling"] == 1.0          # bw 4 on 2x2 passes everything
        for r in rows:
            assert r["kind"] == "low_pass"
            assert np.isfinite(r["entropy"])

    def test_frequency_sweep_rejects_bad_kind(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        with pytest.raises(ValueError):
            frequency_sweep(model, ds, ds, AttackConfig(iterations=2, seed=0),
                            "band_pass", [2])

    def test_regularization_sweep_smoothness_responds(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        cfg = AttackConfig(eps=0.1, iterations=100, batch_size=4, lr=0.05, seed=0)
        rows = regularization_sweep(model, ds, ds, cfg, [0.0, 50.0])
        assert [r["lambda"] for r in rows] == [0.0, 50.0]
        # sign(D) alternates, so the unregularized optimum is very rough; a
        # heavy penalty must produce a flatter pattern
        assert rows[1]["smoothness"] < rows[0]["smoothness"]

    def test_regularization_sweep_rejects_negative(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        with pytest.raises(ValueError):
            regularization_sweep(model, ds, ds, AttackConfig(iterations=2, seed=0), [-1.0])


class TestCosineStats:
    def test_keys_and_range(self):
        model = linear_model(bias0=1.0)
        ds = toy_dataset(margin_images())
        pert = Perturbation(0.1 * np.sign(D).reshape(1, 2, 2).astype(np.float32),
                            0.1, ALL_PASS, {})
        stats = logit_cosine_stats(model, ds, pert, n_images=3, seed=0)
        assert set(stats) == {"cos_pattern_adv", "cos_image_adv"}
        for val in stats.values():
            assert -1.0 - 1e-6 <= val <= 1.0 + 1e-6


class TestPersistence:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        v = rng.uniform(-0.05, 0.05, size=(3, 8, 8)).astype(np.float32)
        spec = FreqFilterSpec("high_pass", 6)
        pert = Perturbation(v, 0.07, spec, {"kind": "uap", "mode": "untargeted",
                                            "seed": "11"})
        path = tmp_path / "pert.bin"
        save_perturbation(path, pert)
        back = load_perturbation(path)
        assert np.array_equal(back.v, v)
        assert back.eps == pytest.approx(0.07)
        assert back.filter == spec
        assert back.meta["seed"] == "11"
        assert back.meta["mode"] == "untargeted"

    def test_missing_tensor_rejected(self, tmp_path):
        from freqlens.data import write_checkpoint
        path = tmp_path / "other.bin"
        write_checkpoint(path, {"something.else": np.zeros(3, dtype=np.float32)},
                         {"eps": "0.1"})
        with pytest.raises(DataError):
            load_perturbation(path)
