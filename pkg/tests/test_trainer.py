import math

import numpy as np
import pytest

from clmorph.errors import ConfigurationError, FormatError
from clmorph.losses import LossConfig
from clmorph.ndtensor import Tensor
from clmorph.network import NetworkConfig, save_network
from clmorph.synthdata import SyntheticSpec, write_dataset
from clmorph.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    TrainState,
    _batch_inputs,
    adam_step,
    config_from_dict,
    config_to_dict,
    fit,
    load_checkpoint,
    load_dataset,
    lr_at,
    save_checkpoint,
)

TINY_NET = NetworkConfig(channels=(2, 4), proj_dim=4)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(root, SyntheticSpec(shape=(8, 8, 8), n_structures=2, axis_range=(0.2, 0.3)), 5)
    return load_dataset(root)


def cfg(**kw):
    base = dict(epochs=2, batch_size=2, network=TINY_NET, loss=LossConfig(sigma2=0.01))
    base.update(kw)
    return TrainConfig(**base)


def test_adam_scalar_matches_hand_computation():
    p = {"x": Tensor(np.array(1.0))}
    state = TrainState.fresh(0)
    adam_step(p, {"x": np.array(0.5)}, state, lr=0.1)
    # first bias-corrected step moves by lr * g / (|g| + eps)
    assert p["x"].data == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    adam_step(p, {"x": np.array(-1.0)}, state, lr=0.1)
    m = 0.9 * 0.05 + 0.1 * -1.0
    v = 0.999 * 0.00025 + 0.001 * 1.0
    step = 0.1 * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p["x"].data == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - step, abs=1e-15)


def test_adam_missing_gradient_counts_as_zero():
    p = {"x": Tensor(np.array([1.0, 2.0]))}
    adam_step(p, {}, TrainState.fresh(0), lr=0.1)
    assert np.array_equal(p["x"].data, [1.0, 2.0])


@pytest.mark.parametrize("epoch,expected", [(0, 3e-3), (19, 3e-3), (20, 3e-4), (45, 3e-5)])
def test_step_decay_schedule(epoch, expected):
    assert lr_at(epoch, TrainConfig()) == pytest.approx(expected, rel=1e-12)


def test_config_validation():
    for bad in (
        dict(epochs=0),
        dict(batch_size=1),
        dict(pair_mode="x"),
        dict(direction="x"),
        dict(lr0=0.0),
        dict(use_recon=False, use_smooth=False, use_contrast=False),
    ):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    TrainConfig(batch_size=1, use_contrast=False)


def test_config_dict_round_trip():
    c = cfg(crop=(4, 4, 4), direction="both")
    assert config_from_dict(config_to_dict(c)) == c


def test_smoke_run_is_finite_and_logs_every_step(tiny):
    steps = []
    net, state = fit(tiny, cfg(epochs=5), on_step=steps.append)
    # 5 samples in batches of 2; the trailing single sample is skipped
    assert state.epoch == 5 and len(steps) == 5 * 2 == state.step
    assert all(tuple(r) == LOG_COLUMNS for r in steps)
    assert all(math.isfinite(r[k]) for r in steps for k in LOG_COLUMNS)
    assert all(np.isfinite(p.data).all() for p in net.parameters())


def test_short_batches_skipped_when_contrast_needs_pairs(tiny):
    state = TrainState.fresh(0)
    net, _ = fit(tiny, cfg(epochs=1, batch_size=4, train_samples=5), state=state)
    assert state.step == 1


def test_training_is_deterministic(tiny):
    a = fit(tiny, cfg(epochs=2))[1].history
    b = fit(tiny, cfg(epochs=2))[1].history
    assert a == b
    c = fit(tiny, cfg(epochs=2, seed=8))[1].history
    assert a != c


def test_resume_is_bit_identical(tiny, tmp_path):
    config = cfg(epochs=4, direction="both", augment=True, crop=(8, 8, 8))
    net_full, state_full = fit(tiny, config)
    net_half, state_half = fit(tiny, cfg(epochs=2, direction="both", augment=True, crop=(8, 8, 8)))
    save_checkpoint(tmp_path / "c.clmp", net_half, state_half, config)
    net, state, loaded = load_checkpoint(tmp_path / "c.clmp")
    assert loaded == config
    fit(tiny, loaded, net, state)
    assert state.history == state_full.history
    for k, v in net_full.state_dict().items():
        assert np.array_equal(v, net.state_dict()[k])


def test_load_checkpoint_rejects_plain_network(tiny, tmp_path):
    net, _ = fit(tiny, cfg(epochs=1))
    save_network(tmp_path / "n.clmp", net)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "n.clmp")


class TestBatchInputs:
    def test_atlas_to_sample(self, tiny):
        images, moving, fixed, pairs = _batch_inputs(tiny, [0, 3], TrainState.fresh(0), cfg())
        assert len(images) == 3 and images[2] is tiny.atlas
        assert moving == [2, 2] and fixed == [0, 1] and pairs == [(0, 2), (1, 2)]

    def test_sample_to_atlas(self, tiny):
        _, moving, fixed, _ = _batch_inputs(tiny, [0, 3], TrainState.fresh(0), cfg(direction="sample_to_atlas"))
        assert moving == [0, 1] and fixed == [2, 2]

    def test_both_directions_occur(self, tiny):
        state = TrainState.fresh(0)
        seen = set()
        for _ in range(20):
            _, moving, fixed, _ = _batch_inputs(tiny, [0, 1], state, cfg(direction="both"))
            for m, f in zip(moving, fixed):
                assert {m, f} in ({0, 2}, {1, 2})
                seen.add(m == 2)
        assert seen == {True, False}

    def test_augment_pairs_each_sample_with_own_atlas_copy(self, tiny):
        images, moving, fixed, pairs = _batch_inputs(tiny, [0, 1], TrainState.fresh(0), cfg(augment=True, crop=(8, 8, 8)))
        assert len(images) == 4 and pairs == [(0, 2), (1, 3)]

    def test_random_pairs_are_distinct(self, tiny):
        images, moving, fixed, pairs = _batch_inputs(tiny, [0, 1], TrainState.fresh(0), cfg(pair_mode="random"))
        assert len(images) == 4 and moving == [0, 1] and fixed == [2, 3]
        for a, b in pairs:
            assert images[a] is not images[b]
