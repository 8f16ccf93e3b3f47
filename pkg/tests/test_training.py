import numpy as np
import pytest

from reachgraph import gridworld as gw
from reachgraph.chain_oracle import reach_full
from reachgraph.model import DOT, init_params, load_checkpoint, nce_loss, score
from reachgraph.pair_sampler import PairSampler, SamplerConfig
from reachgraph.training import TrainConfig, TrainingDiverged, TrainLog, train


def small_model(seed=0, **kw):
    return init_params(hidden=16, latent_dim=8, seed=seed, **kw)


def test_zero_learning_rate_leaves_parameters_alone():
    data = gw.collect(gw.load_map("nail"), 1, 300, 0)
    init = small_model()
    params, log = train(data, SamplerConfig(4, rng_seed=1), init, TrainConfig(steps=30, learning_rate=0.0, log_every=1))
    assert np.array_equal(params.buffer, init.buffer)
    # a fixed model scored on fresh batches: the objective varies only through sampling
    probe = PairSampler(data, SamplerConfig(4, rng_seed=2)).batch(64)
    assert nce_loss(params, DOT, probe, 1, data.features).objective == nce_loss(init, DOT, probe, 1, data.features).objective


def test_model_init_is_not_mutated():
    data = gw.collect(gw.load_map("nail"), 1, 300, 0)
    init = small_model()
    before = init.buffer.copy()
    train(data, SamplerConfig(4, rng_seed=1), init, TrainConfig(steps=5))
    assert np.array_equal(init.buffer, before)


def test_same_seed_same_log():
    data = gw.collect(gw.load_map("flask"), 1, 500, 0)
    cfg, tcfg = SamplerConfig(8, rng_seed=3), TrainConfig(steps=60, log_every=10)
    p1, a = train(data, cfg, small_model(), tcfg)
    p2, b = train(data, cfg, small_model(), tcfg)
    assert a == b
    assert np.array_equal(p1.buffer, p2.buffer)
    assert a.step == [10, 20, 30, 40, 50, 60]


def test_log_steps_must_increase():
    log = TrainLog()
    report = type("R", (), {"objective": -1.0, "positive_accuracy": 0.5, "negative_accuracy": 0.5})()
    log.append(3, report)
    with pytest.raises(ValueError):
        log.append(3, report)


def test_log_csv(tmp_path):
    data = gw.collect(gw.load_map("nail"), 1, 200, 0)
    _, log = train(data, SamplerConfig(4, rng_seed=1), small_model(), TrainConfig(steps=4, log_every=2))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,objective,pos_acc,neg_acc"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["2", "4"]
    assert float(lines[1].split(",")[1]) == log.objective[0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=10, average_tail=11)


def test_divergence_is_reported():
    data = gw.collect(gw.load_map("nail"), 1, 200, 0)
    bad = small_model()
    bad.tensors["phi.W1"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(data, SamplerConfig(4, rng_seed=1), bad, TrainConfig(steps=3), sim=DOT)


def test_checkpoints_are_written(tmp_path):
    data = gw.collect(gw.load_map("nail"), 1, 200, 0)
    path = tmp_path / "run.ckpt"
    params, _ = train(data, SamplerConfig(4, rng_seed=1), small_model(), TrainConfig(steps=6, checkpoint_every=3),
                      checkpoint_path=path)
    back = load_checkpoint(path)
    assert back.meta["step"] == "6"
    assert np.array_equal(back.buffer, params.buffer)
    probe = PairSampler(data, SamplerConfig(4, rng_seed=9)).batch(32)
    assert nce_loss(back, DOT, probe, 1, data.features) == nce_loss(params, DOT, probe, 1, data.features)


def test_tail_average_is_mean_of_iterates():
    data = gw.collect(gw.load_map("nail"), 1, 200, 0)
    cfg = SamplerConfig(4, rng_seed=1)
    iterates = []
    params = small_model()
    for steps in (1, 2, 3):
        p, _ = train(data, cfg, params, TrainConfig(steps=steps))
        iterates.append(p.buffer)
    averaged, _ = train(data, cfg, params, TrainConfig(steps=3, average_tail=2))
    assert np.allclose(averaged.buffer, (iterates[1] + iterates[2]) / 2, rtol=0, atol=1e-15)


@pytest.mark.parametrize("name", sorted(gw.BUILTIN_MAPS))
def test_smoothed_objective_rises_early(name):
    spec = gw.load_map(name)
    data = gw.collect(spec, 1, 5000, 0)
    _, log = train(data, SamplerConfig(16, rng_seed=1), init_params(seed=2), TrainConfig(steps=1000, log_every=1))
    # The objective is measured on fresh sampled batches, so a plateau shows
    # up as noise; block means may only dip by a few standard errors.
    blocks = np.asarray(log.objective).reshape(10, 100)
    means = blocks.mean(axis=1)
    stderr = blocks[1:].std() / np.sqrt(100) * np.sqrt(2)
    for i in range(10):
        assert np.all(means[i + 1:] >= means[i] - 4 * stderr)
    assert means[-1] > means[0]


def test_flip_chain_reaches_analytic_optimum():
    flip = np.array([[0.0, 1.0], [1.0, 0.0]])
    data = gw.simulate_chain(flip, 0, 1, 4000, rng_seed=0)
    cfg = SamplerConfig(1, 1, "uniform", rng_seed=1)
    params, _ = train(data, cfg, init_params(hidden=32, latent_dim=8, seed=2),
                      TrainConfig(steps=20_000, batch_size=256, learning_rate=1e-3), sim=DOT)
    # optimum: f = log 2 on the observed transitions, f -> -inf on self pairs
    pd = reach_full(flip, 1, 4000, 0)
    ratio = pd.conditional() / 0.5
    sig = 2 / 3
    optimum = sum(pd.joint[y, x] * np.log(sig) for y in range(2) for x in range(2) if ratio[y, x] > 0)
    optimum += sum(pd.marginal_y[y] * 0.5 * np.log(1 - sig) for y in range(2) for x in range(2) if ratio[y, x] > 0)
    assert optimum == pytest.approx(np.log(2 / 3) + 0.5 * np.log(1 / 3), abs=1e-12)
    probe = PairSampler(data, SamplerConfig(1, 1, "uniform", rng_seed=5)).batch(200_000)
    assert nce_loss(params, DOT, probe, 1, data.features).objective == pytest.approx(optimum, abs=0.02)
    assert score(params, DOT, data.features[1], data.features[0]) > 0
