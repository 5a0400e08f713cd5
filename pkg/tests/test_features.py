import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from floodcast.features import (
    Batch,
    Dataset,
    FeatureError,
    FeatureRangeError,
    FeatureSpec,
    _window_sums,
    assemble,
    dataset_sample,
    delta_dem,
    delta_dem_array,
    delta_wd,
    read_samples,
    sample_patches,
    write_samples,
)
from floodcast.raster import Raster, mask_from_dem
from floodcast.sim import SimConfig, simulate

from conftest import constant_event, flat_dem

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def brute_delta_dem(d):
    """Loop oracle: neighbour lookups with a phantom -1 outside the raster."""
    rows, cols = d.shape

    def at(i, j):
        return d[i, j] if 0 <= i < rows and 0 <= j < cols else -1.0

    out = np.zeros((4, rows, cols))
    for i in range(rows):
        for j in range(cols):
            out[0, i, j] = d[i, j] - at(i, j - 1)
            out[1, i, j] = d[i, j] - at(i, j + 1)
            out[2, i, j] = d[i, j] - at(i - 1, j)
            out[3, i, j] = d[i, j] - at(i + 1, j)
    return out


class TestDeltaDem:
    def test_two_by_two_leftward(self):
        out = delta_dem(Raster(np.array([[1.0, 2.0], [3.0, 4.0]])))
        np.testing.assert_array_equal(out.channels[0], [[2.0, 1.0], [4.0, 1.0]])

    def test_flat_dem(self):
        out = delta_dem_array(np.full((5, 6), 3.0))
        assert np.all(out[:, 1:-1, 1:-1] == 0.0)
        assert np.all(out[0, :, 0] == 4.0)

    def test_labels_and_shape(self):
        out = delta_dem(Raster(np.zeros((3, 7))))
        assert out.labels == ("dD_left", "dD_right", "dD_down", "dD_up")
        assert out.channels.shape == (4, 3, 7)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
    def test_matches_loop_oracle(self, d):
        np.testing.assert_allclose(delta_dem_array(d), brute_delta_dem(d), rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=finite))
    def test_left_right_antisymmetry(self, d):
        out = delta_dem_array(d)
        np.testing.assert_allclose(out[0, :, 1:], -out[1, :, :-1], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 5, 5), elements=finite))
    def test_linear_on_interior(self, ab):
        a, b = ab
        lhs = delta_dem_array(a + b)[:, 1:-1, 1:-1]
        rhs = (delta_dem_array(a) + delta_dem_array(b))[:, 1:-1, 1:-1]
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestDeltaWd:
    def test_constant_frames(self):
        out = delta_wd([Raster(np.full((3, 3), 0.1)), Raster(np.full((3, 3), 0.3))])
        np.testing.assert_allclose(out.channels, 0.2)
        assert out.channels.shape == (1, 3, 3)

    def test_equal_frames_give_zero(self):
        f = Raster(np.arange(9.0).reshape(3, 3))
        assert np.all(delta_wd([f, f, f]).channels == 0.0)

    def test_matches_elementwise_subtraction(self, rng):
        frames = [Raster(rng.random((4, 5))) for _ in range(3)]
        out = delta_wd(frames)
        for k in range(2):
            np.testing.assert_array_equal(out.channels[k], frames[k + 1].cells - frames[k].cells)

    def test_single_frame_rejected(self):
        with pytest.raises(FeatureError):
            delta_wd([Raster(np.zeros((2, 2)))])

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(FeatureError):
            delta_wd([Raster(np.zeros((2, 2))), Raster(np.zeros((3, 2)))])


class TestFeatureSpec:
    @pytest.mark.parametrize("T", range(2, 7))
    @pytest.mark.parametrize("H", [1, 6, 12])
    def test_channel_count(self, T, H):
        spec = FeatureSpec(T=T, H=H)
        assert spec.n_channels == 3 * T + H + 3
        assert len(spec.labels()) == spec.n_channels

    def test_desk_default_has_thirty_channels(self):
        assert FeatureSpec().n_channels == 30

    @pytest.mark.parametrize("H", [1, 12])
    def test_single_history_frame(self, H):
        assert FeatureSpec(T=1, H=H).n_channels == H + 6

    def test_slices_tile_the_stack(self):
        spec = FeatureSpec(T=4, H=3)
        sl = spec.slices()
        assert sl["D"] == slice(0, 1)
        assert sl["dW"].stop == spec.n_channels
        widths = [s.stop - s.start for s in sl.values()]
        assert widths == [1, 4, 6, 4, 3]

    def test_invalid(self):
        with pytest.raises(FeatureError):
            FeatureSpec(T=0)


class TestAssemble:
    @pytest.fixture
    def flat_run(self):
        dem, mask = flat_dem(4)
        event = constant_event(12.0, 20)
        frames = simulate(dem, mask, event, SimConfig(boundary="closed", inner_steps_per_frame=10)).frames
        return dem, mask, frames, event

    def test_channel_order_and_values(self, flat_run):
        dem, mask, frames, event = flat_run
        spec = FeatureSpec(T=3, H=2)
        s = assemble(dem, mask, frames, event, 5, spec)
        stack = s.stack()
        sl = spec.slices()
        assert stack.shape == (spec.n_channels, 4, 4)
        np.testing.assert_array_equal(stack[0], dem.cells)
        np.testing.assert_array_equal(stack[sl["dD"]], delta_dem_array(dem.cells))
        np.testing.assert_array_equal(stack[sl["W"]], [frames[k].cells for k in (3, 4, 5)])
        np.testing.assert_allclose(stack[sl["dW"]], np.diff(stack[sl["W"]], axis=0))
        assert np.all(stack[sl["R"]] == 12.0)

    def test_rain_window(self, flat_run):
        dem, mask, frames, _ = flat_run
        event = constant_event(0.0, 20)
        event = type(event)("ramp", 2, 5, tuple(float(k) for k in range(20)))
        s = assemble(dem, mask, frames, event, 6, FeatureSpec(T=3, H=2))
        # steps t-T+2 .. t+H
        np.testing.assert_array_equal(s.rain, [5.0, 6.0, 7.0, 8.0])

    def test_target_matches_simulator_frame_pair(self, flat_run):
        dem, mask, frames, event = flat_run
        s = assemble(dem, mask, frames, event, 4, FeatureSpec(T=2, H=1))
        np.testing.assert_array_equal(s.target_delta, frames[5].cells - frames[4].cells)
        np.testing.assert_allclose(s.target_delta, 12.0 / 1000.0 / 12.0, rtol=1e-12)

    def test_future_frames(self, flat_run):
        dem, mask, frames, event = flat_run
        s = assemble(dem, mask, frames, event, 4, FeatureSpec(T=2, H=3))
        np.testing.assert_array_equal(s.future, [frames[k].cells for k in (5, 6, 7)])
        np.testing.assert_array_equal(s.target_depth, frames[7].cells)

    def test_range_errors(self, flat_run):
        dem, mask, frames, event = flat_run
        with pytest.raises(FeatureRangeError):
            assemble(dem, mask, frames, event, 1, FeatureSpec(T=3, H=1))
        with pytest.raises(FeatureRangeError):
            assemble(dem, mask, frames, event, 18, FeatureSpec(T=3, H=2))
        short_rain = constant_event(12.0, 10)
        with pytest.raises(FeatureRangeError):
            assemble(dem, mask, frames, short_rain, 9, FeatureSpec(T=3, H=2))

    def test_pure(self, flat_run):
        dem, mask, frames, event = flat_run
        a = assemble(dem, mask, frames, event, 7, FeatureSpec(T=3, H=2)).stack()
        b = assemble(dem, mask, frames, event, 7, FeatureSpec(T=3, H=2)).stack()
        np.testing.assert_array_equal(a, b)

    def test_crop_keeps_alignment(self, flat_run):
        dem, mask, frames, event = flat_run
        s = assemble(dem, mask, frames, event, 7, FeatureSpec(T=3, H=2))
        c = s.crop(1, 2, 2)
        np.testing.assert_array_equal(c.stack(), s.stack()[:, 1:3, 2:4])
        assert c.anchor == (1, 2, 7)


class TestSamplePatches:
    def spec(self, **kw):
        return FeatureSpec(T=5, H=12, patch_size=kw.pop("patch_size", 16), **kw)

    def test_zero_patches(self, toy_dataset):
        assert sample_patches(toy_dataset, list(toy_dataset.events), self.spec(), 0, 0) == []

    def test_raster_smaller_than_patch(self, toy_dataset):
        with pytest.raises(FeatureError):
            sample_patches(toy_dataset, list(toy_dataset.events), self.spec(patch_size=33), 1, 0)

    def test_deterministic(self, toy_dataset):
        names = list(toy_dataset.events)
        a = [(s.event_name, s.anchor) for s in sample_patches(toy_dataset, names, self.spec(), 20, 7)]
        b = [(s.event_name, s.anchor) for s in sample_patches(toy_dataset, names, self.spec(), 20, 7)]
        assert a == b

    def test_patch_content_matches_full_sample(self, toy_dataset):
        spec = self.spec()
        s = sample_patches(toy_dataset, list(toy_dataset.events), spec, 1, 3)[0]
        r0, c0, t = s.anchor
        full = dataset_sample(toy_dataset, s.event_name, t, spec)
        np.testing.assert_array_equal(s.stack(), full.stack()[:, r0:r0 + 16, c0:c0 + 16])

    def test_wet_fraction(self, toy_dataset):
        samples = sample_patches(toy_dataset, list(toy_dataset.events), self.spec(), 40, 1, wet_bias=1.0)
        assert all((np.abs(s.target_delta[s.mask]) > 0.01).any() for s in samples)

    def test_every_patch_touches_catchment(self, toy_dataset):
        samples = sample_patches(toy_dataset, list(toy_dataset.events), self.spec(), 30, 2, wet_bias=0.0)
        assert all(s.mask.any() for s in samples)

    def test_uniform_without_wet_bias(self, toy_dataset):
        """Chi-square of corner rows and anchor times against the uniform oracle."""
        spec = self.spec()
        names = list(toy_dataset.events)
        samples = sample_patches(toy_dataset, names, spec, 1500, 11, wet_bias=0.0)
        valid = np.argwhere(_window_sums(np.asarray(toy_dataset.mask.inside), 16) > 0)
        bins = np.array_split(np.unique(valid[:, 0]), 4)
        expected_rows = np.array([np.isin(valid[:, 0], b).sum() for b in bins], dtype=float)
        observed_rows = np.array([sum(s.anchor[0] in b for s in samples) for b in bins], dtype=float)
        expected_rows *= len(samples) / expected_rows.sum()
        assert stats.chisquare(observed_rows, expected_rows).pvalue > 1e-3

        times = np.array([s.anchor[2] for s in samples])
        anchors = list(toy_dataset.events[names[0]].anchors(spec))
        observed_t = np.array([(times == t).sum() for t in anchors], dtype=float)
        assert stats.chisquare(observed_t).pvalue > 1e-3

    def test_bad_wet_bias(self, toy_dataset):
        with pytest.raises(FeatureError):
            sample_patches(toy_dataset, list(toy_dataset.events), self.spec(), 1, 0, wet_bias=1.5)


class TestBatchAndCache:
    def test_batch_stacks_samples(self, toy_dataset):
        spec = FeatureSpec(T=5, H=12, patch_size=8)
        samples = sample_patches(toy_dataset, list(toy_dataset.events), spec, 3, 0)
        batch = Batch.from_samples(samples)
        assert len(batch) == 3
        assert batch.stack().shape == (3, 30, 8, 8)
        assert batch.future.shape == (3, 12, 8, 8)
        np.testing.assert_array_equal(batch.stack()[1], samples[1].stack())

    def test_mixed_specs_rejected(self, toy_dataset):
        a = dataset_sample(toy_dataset, "tr20_1", 10, FeatureSpec(T=5, H=12))
        b = dataset_sample(toy_dataset, "tr20_1", 10, FeatureSpec(T=5, H=1))
        with pytest.raises(FeatureError):
            Batch.from_samples([a, b])

    def test_cache_round_trip(self, toy_dataset, tmp_path):
        spec = FeatureSpec(T=3, H=4, patch_size=8)
        samples = sample_patches(toy_dataset, list(toy_dataset.events), spec, 5, 4)
        index = write_samples(samples, tmp_path)
        back = read_samples(index)
        assert len(back) == 5
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.stack(), b.stack())
            np.testing.assert_array_equal(a.target_delta, b.target_delta)
            np.testing.assert_array_equal(a.mask, b.mask)
            assert (a.event_name, a.anchor) == (b.event_name, b.anchor)


class TestDatasetLoad:
    def test_load_from_disk(self, toy_dataset_dir):
        ds = Dataset.load(toy_dataset_dir)
        assert sorted(ds.events) == ["tr100_1", "tr10_1", "tr50_1"]
        assert ds.events["tr10_1"].depths.shape == (30, 32, 32)

    def test_missing_event(self, toy_dataset_dir):
        with pytest.raises(KeyError):
            Dataset.load(toy_dataset_dir, ["tr7_1"])
