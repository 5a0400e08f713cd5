import numpy as np
import pytest

from floodcast import autodiff as ad
from floodcast.autodiff import ShapeError, Tensor, gradcheck
from floodcast.features import FeatureRangeError, FeatureSpec, Sample, delta_dem_array
from floodcast.models import (
    FAMILIES,
    ModelConfigError,
    ModelSpec,
    build_model,
    feature_tensor,
    predict,
    predict_ar,
    predict_arrays,
    predict_autoencoder,
    predict_fcn,
    predict_graph,
    predict_linear_extrap,
    predict_no_change,
    predict_unet,
    rollout_tensor,
)

SMALL = {"fcn": (4, 4), "autoencoder": (3, 4), "unet": (3, 4), "graph": (4, 4)}


def make_sample(rng, size, T=5, H=12, dem=None, depths=None, rain=None):
    spec = FeatureSpec(T=T, H=H, patch_size=size)
    dem = rng.random((size, size)) * 3.0 if dem is None else dem
    static = np.concatenate([dem[None], delta_dem_array(dem)])
    depths = rng.random((T, size, size)) * 0.4 if depths is None else depths
    rain = rng.random(T + H - 1) * 20.0 if rain is None else rain
    return Sample(
        static=static, rain=rain, depths=depths, target_delta=np.zeros((size, size)),
        mask=np.ones((size, size), dtype=bool), event_name="synthetic", anchor=(0, 0, T - 1), spec=spec,
    )


def model_input(model, sample):
    frames = [Tensor(sample.depths[None, i:i + 1]) for i in range(sample.spec.T)]
    return feature_tensor(sample.static[None], sample.rain[None], frames, model.fspec)


def small_model(family, H=12, **kw):
    return build_model(ModelSpec(family, H=H, widths=SMALL.get(family, ()), **kw))


class TestSpec:
    def test_unknown_family(self):
        with pytest.raises(ModelConfigError):
            ModelSpec("transformer")

    def test_default_widths_and_label(self):
        spec = ModelSpec("unet")
        assert spec.widths == (32, 64, 128)
        assert spec.label == "unet"

    def test_round_trip(self):
        spec = ModelSpec("graph", T=3, H=1, widths=(8, 8), seed=4)
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_baselines_have_no_parameters(self):
        assert build_model(ModelSpec("no_change")).n_parameters() == 0
        assert build_model(ModelSpec("linear_extrap")).n_parameters() == 0
        assert not ModelSpec("linear_extrap").trainable


class TestShapeContract:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_full_patch_size_preserved(self, rng, family):
        sample = make_sample(rng, 128)
        H = 1 if family.startswith("ar_") else 12
        model = build_model(ModelSpec(family, H=H, widths=SMALL.get(family, ())))
        pred = predict(model, sample if H == 12 else make_sample(rng, 128, H=1))
        assert pred.delta.shape == (128, 128)
        assert pred.depth.min() >= 0.0

    def test_autoencoder_bottleneck(self):
        model = build_model(ModelSpec("autoencoder"))
        assert model.bottleneck_shape(128, 128) == (16, 16)

    @pytest.mark.parametrize("family", ["autoencoder", "unet"])
    def test_indivisible_dims(self, rng, family):
        model = small_model(family)
        with pytest.raises(ShapeError):
            model(model_input(model, make_sample(rng, 10)))

    def test_channel_mismatch(self, rng):
        model = small_model("fcn")
        with pytest.raises(ShapeError):
            model(Tensor(rng.random((1, 7, 8, 8))))

    def test_checkpoint_shape_mismatch(self):
        a = small_model("fcn").arrays()
        with pytest.raises(ShapeError):
            build_model(ModelSpec("fcn", widths=(5, 4))).load_arrays(a)


class TestBaselines:
    def test_no_change(self, rng):
        s = make_sample(rng, 8)
        p = predict_no_change(s)
        assert np.all(p.delta == 0.0)
        np.testing.assert_array_equal(p.depth, s.depths[-1])

    def test_linear_extrap_constant_history(self, rng):
        frame = rng.random((6, 6))
        s = make_sample(rng, 6, depths=np.stack([frame] * 5))
        assert np.all(predict_linear_extrap(s).delta == 0.0)

    def test_linear_extrap_step(self, rng):
        depths = np.stack([np.full((4, 4), v) for v in (0.0, 0.0, 0.0, 0.1, 0.2)])
        np.testing.assert_allclose(predict_linear_extrap(make_sample(rng, 4, depths=depths)).delta, 0.1)

    def test_linear_extrap_needs_history(self):
        with pytest.raises(ModelConfigError):
            build_model(ModelSpec("linear_extrap", T=1))

    def test_linear_ramp_rolled_out_is_exact(self, rng):
        depths = np.stack([np.full((4, 4), 0.1 * k + 0.05) for k in range(5)])
        s = make_sample(rng, 4, H=3, depths=depths)
        model = build_model(ModelSpec("linear_extrap", H=1))
        delta = predict_arrays(model, s.static[None], s.rain[None], s.depths[None], 3)[0]
        np.testing.assert_allclose(delta, 0.3, atol=1e-12)


class TestAutoRegressive:
    @pytest.mark.parametrize("kernel", ["1x1", "5x5"])
    def test_identity_init_is_no_change(self, rng, kernel):
        s = make_sample(rng, 8, H=1)
        arrays = build_model(ModelSpec(f"ar_{kernel}", H=1)).arrays()
        np.testing.assert_allclose(predict_ar(s, arrays, kernel).delta, 0.0, atol=1e-15)

    def test_uses_only_depth_channels(self, rng):
        model = build_model(ModelSpec("ar_5x5", H=1, seed=3))
        model.params["ar.w"].data = rng.standard_normal(model.params["ar.w"].shape)
        s = make_sample(rng, 10, H=1)
        other = make_sample(rng, 10, H=1, depths=s.depths)
        np.testing.assert_array_equal(predict(model, s).delta, predict(model, other).delta)

    def test_translation_equivariance_5x5(self, rng):
        model = build_model(ModelSpec("ar_5x5", H=1))
        model.params["ar.w"].data = rng.standard_normal(model.params["ar.w"].shape)
        s = make_sample(rng, 20, H=1)
        moved = make_sample(rng, 20, H=1, depths=np.roll(s.depths, (3, 2), axis=(1, 2)))
        a = np.roll(predict(model, s).delta, (3, 2), axis=(0, 1))
        b = predict(model, moved).delta
        np.testing.assert_allclose(b[5:-2, 4:-2], a[5:-2, 4:-2], atol=1e-12)

    def test_wrong_kernel_size(self, rng):
        arrays = build_model(ModelSpec("ar_1x1", H=1)).arrays()
        with pytest.raises(ShapeError):
            predict_ar(make_sample(rng, 6, H=1), arrays, "5x5")


class TestDeepModels:
    @pytest.mark.parametrize("family", ["fcn", "autoencoder", "unet"])
    def test_zero_final_gives_zero_delta(self, rng, family):
        model = small_model(family, zero_final=True)
        assert np.all(predict(model, make_sample(rng, 16)).delta == 0.0)

    @pytest.mark.parametrize("family,fn", [
        ("fcn", predict_fcn), ("autoencoder", predict_autoencoder),
        ("unet", predict_unet), ("graph", predict_graph),
    ])
    def test_family_wrappers_match_model(self, rng, family, fn):
        model = small_model(family, seed=2)
        s = make_sample(rng, 16)
        np.testing.assert_array_equal(fn(s, model.arrays(), SMALL[family]).delta, predict(model, s).delta)

    def test_unet_skip_ablation_changes_output(self, rng):
        s = make_sample(rng, 16)
        with_skips = small_model("unet", seed=1)
        without = small_model("unet", seed=1, skips=False)
        assert not np.allclose(predict(with_skips, s).delta, predict(without, s).delta)

    @pytest.mark.parametrize("family", ["fcn", "autoencoder", "unet", "graph", "ar_5x5"])
    def test_full_model_gradcheck(self, rng, family):
        H = 1 if family.startswith("ar_") else 12
        model = small_model(family, H=H, seed=5)
        if family.startswith("ar_"):
            model.params["ar.w"].data = rng.standard_normal(model.params["ar.w"].shape)
        for name, p in model.params.items():
            if name.endswith(".b"):
                p.data = rng.normal(0.0, 0.1, p.shape)  # keep off the relu kink
        model.fit_normalizer(model_input(model, make_sample(rng, 8, H=H)).data)
        x = model_input(model, make_sample(rng, 8, H=H))
        weights = rng.standard_normal((1, 1, 8, 8))
        params = list(model.params.values())
        err = gradcheck(lambda: ad.total(ad.mul(model(x), weights)), params, eps=1e-6, max_coords=12)
        assert err < 1e-6

    @pytest.mark.parametrize("family", ["fcn", "unet", "graph"])
    def test_deterministic(self, rng, family):
        s = make_sample(rng, 16)
        a = predict(small_model(family, seed=9), s).delta
        b = predict(small_model(family, seed=9), s).delta
        assert np.array_equal(a, b)


class TestGraph:
    def test_flat_dem_uniform_water_is_uniform_inside(self, rng):
        size = 12
        s = make_sample(rng, size, dem=np.full((size, size), 2.0),
                        depths=np.full((5, size, size), 0.3), rain=np.full(16, 5.0))
        model = small_model("graph", seed=3)
        delta = predict(model, s).delta
        interior = delta[2:-2, 2:-2]
        np.testing.assert_allclose(interior, interior[0, 0], atol=1e-12)

    def test_dry_and_rainless_with_zero_final(self, rng):
        s = make_sample(rng, 8, depths=np.zeros((5, 8, 8)), rain=np.zeros(16))
        model = small_model("graph", zero_final=True)
        assert np.all(predict(model, s).delta == 0.0)

    def test_locality(self, rng):
        size = 13
        s = make_sample(rng, size, H=1)
        model = build_model(ModelSpec("graph", H=1, widths=(4, 4), seed=6))
        base = predict(model, s).delta
        depths = s.depths.copy()
        depths[-1, 6, 6] += 0.5
        moved = predict(model, make_sample(rng, size, H=1, dem=s.static[0], depths=depths, rain=s.rain)).delta
        rows, cols = np.nonzero(np.abs(moved - base) > 0)
        assert len(rows) > 0
        assert np.max(np.abs(rows - 6) + np.abs(cols - 6)) <= 2

    def test_flows_are_shared_across_directions(self):
        model = small_model("graph")
        assert sum(name.startswith("flow") for name in model.params) == 2


class TestRollout:
    def test_one_step_rollout_equals_single_prediction(self, rng):
        model = build_model(ModelSpec("fcn", H=1, widths=(4, 4), seed=1))
        s = make_sample(rng, 8, H=1)
        frames = [Tensor(s.depths[None, i:i + 1]) for i in range(5)]
        rolled = rollout_tensor(model, s.static[None], s.rain[None], frames, 1)[0].data[0, 0]
        np.testing.assert_allclose(rolled, predict(model, s).depth, atol=1e-14)

    def test_no_change_fixed_point(self, rng):
        s = make_sample(rng, 8, H=12)
        delta = predict_arrays(build_model(ModelSpec("no_change", H=1)), s.static[None], s.rain[None],
                               s.depths[None], 12)
        assert np.all(delta == 0.0)

    def test_missing_rain_is_range_error(self, rng):
        model = build_model(ModelSpec("fcn", H=1, widths=(4, 4)))
        s = make_sample(rng, 8, H=3)
        frames = [Tensor(s.depths[None, i:i + 1]) for i in range(5)]
        with pytest.raises(FeatureRangeError):
            rollout_tensor(model, s.static[None], s.rain[None], frames, 4)

    def test_multi_step_model_cannot_roll_out(self, rng):
        s = make_sample(rng, 8, H=3)
        with pytest.raises(ModelConfigError):
            predict_arrays(small_model("fcn", H=2), s.static[None], s.rain[None], s.depths[None], 3)
