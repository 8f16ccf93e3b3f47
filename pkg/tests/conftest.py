import numpy as np
import pytest

from reachgraph import gridworld as gw
from reachgraph.model import init_params
from reachgraph.pair_sampler import SamplerConfig
from reachgraph.training import TrainConfig, train


@pytest.fixture(scope="session")
def young_old_model():
    """Cosine model trained on the absorbing chain young -> old (states 0 -> 1)."""
    chain = np.array([[0.7, 0.3], [0.0, 1.0]])
    data = gw.simulate_chain(chain, 0, 400, 10, rng_seed=0)
    cfg = SamplerConfig(2, 1, "marginal_x", rng_seed=1)
    params, _ = train(data, cfg, init_params(hidden=32, latent_dim=8, seed=2), TrainConfig(steps=2000))
    return params, data


@pytest.fixture(scope="session")
def small_trained_four_rooms():
    """A briefly trained four_rooms model; enough structure for API-level checks."""
    spec = gw.load_map("four_rooms")
    data = gw.collect(spec, 1, 5000, rng_seed=0)
    params, _ = train(data, SamplerConfig(16, rng_seed=1), init_params(hidden=64, latent_dim=16, seed=2),
                      TrainConfig(steps=1500))
    return spec, params
