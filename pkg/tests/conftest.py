import numpy as np
import pytest

from floodcast.features import Dataset, EventData
from floodcast.rainfall import RainEvent, make_short_event
from floodcast.raster import Raster, mask_from_dem
from floodcast.sim import SimConfig, run_dataset, simulate, synthetic_dem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_catchment():
    """32x32 procedural DEM with its mask."""
    return synthetic_dem("709", 32)


@pytest.fixture(scope="session")
def toy_dataset(small_catchment):
    """Two short events simulated on the 32x32 catchment, held in memory."""
    dem, mask = small_catchment
    cfg = SimConfig(roughness_coefficient=0.005, boundary="open", inner_steps_per_frame=30)
    ds = Dataset(dem, mask)
    for rp in (20, 100):
        event = make_short_event(rp, 5, seed=0, duration_steps=30)
        ds.events[event.name] = EventData(event, simulate(dem, mask, event, cfg).depth_array())
    return ds


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory, small_catchment):
    """The same kind of data written to disk through ``run_dataset``."""
    dem, mask = small_catchment
    cfg = SimConfig(roughness_coefficient=0.005, boundary="open", inner_steps_per_frame=30)
    events = [make_short_event(rp, 5, seed=0, duration_steps=30) for rp in (10, 50, 100)]
    out = tmp_path_factory.mktemp("toy_data")
    run_dataset(dem, mask, events, cfg, out)
    return out


def constant_event(intensity: float, steps: int, name: str = "const") -> RainEvent:
    return RainEvent(name, 2, 5, tuple([intensity] * steps), "short")


def flat_dem(size: int, elevation: float = 5.0):
    dem = Raster(np.full((size, size), elevation))
    return dem, mask_from_dem(dem)
