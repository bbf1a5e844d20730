import copy

import numpy as np
import pytest

from bridgenet.autodiff import Tensor, no_grad
from bridgenet.data import PairDataset, batch_iter, make_positive_pairs, sample_negatives, synth_two_view
from bridgenet.errors import CheckpointError, ContractError, DimensionError, DivergenceError, ModeError, ParameterError
from bridgenet.gradcheck import numerical_grad
from bridgenet.model import BnnModel, DecoderConfig, ReconModel, TowerConfig, bnn_output, loss_bnn, loss_pair
from bridgenet.train import (
    TrainConfig, TrainState, batch_losses, checkpoint_bytes, checkpoint_load, checkpoint_save, fit, sgd_update,
    train_epoch, write_loss_log,
)

VIEW = (1, 8, 6)
TINY = TowerConfig(input_shape=VIEW, num_conv_layers=2, filters=2, representation_dim=3)


def tiny_data(n=8, seed=0, labels=None, pairing="aligned"):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 1, (n, *VIEW))
    return PairDataset(base, base[:, :, ::-1, :] * 0.5 + 0.2, labels, pairing)


def params_of(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------- config and sgd


@pytest.mark.parametrize("field, value", [("alpha", 0.0), ("lr", -1.0), ("np_ratio", 0.0), ("batch_size", 1),
                                          ("mode", "joint")])
def test_config_validation(field, value):
    with pytest.raises(ParameterError):
        TrainConfig(**{field: value})


def test_sgd_update_examples():
    p = Tensor(np.array([1.0, 2.0]))
    sgd_update([p], [np.array([1.0, 1.0])], 0.5)
    np.testing.assert_array_equal(p.data, [0.5, 1.5])
    sgd_update([p], [np.zeros(2)], 3.0)
    np.testing.assert_array_equal(p.data, [0.5, 1.5])


def test_sgd_update_matches_elementwise():
    rng = np.random.default_rng(0)
    values = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
    grads = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
    params = [Tensor(v.copy()) for v in values]
    sgd_update(params, grads, 0.37)
    for p, v, g in zip(params, values, grads):
        for idx in np.ndindex(v.shape):
            assert p.data[idx] == v[idx] - 0.37 * g[idx]


def test_sgd_update_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_update([Tensor(np.zeros(2))], [np.zeros(3)], 0.1)
    with pytest.raises(ContractError):
        sgd_update([Tensor(np.zeros(2))], [], 0.1)


# ---------------------------------------------------------------- one epoch


def test_zero_learning_rate_is_a_null_step():
    model = BnnModel(TINY, seed=1)
    before = {k: p.data.copy() for k, p in model.named_parameters().items()}
    train_epoch(model, tiny_data(), TrainConfig(lr=0.0, batch_size=6), TrainState.fresh(0))
    for k, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.data, before[k])


def test_left_update_matches_finite_difference_step():
    ds = tiny_data(n=2, seed=3)
    model = BnnModel(TINY, seed=2)
    reference = copy.deepcopy(model).train()
    cfg = TrainConfig(lr=0.3, np_ratio=1.0, batch_size=8, alpha=1.5)
    state = TrainState.fresh(11)

    # replay the epoch's sampling on a copy of the generator
    rng = copy.deepcopy(state.rng)
    neg = sample_negatives(ds, cfg.np_ratio, rng)
    (pos_b, neg_b), = list(batch_iter(make_positive_pairs(ds), neg, cfg.batch_size, rng))
    i1 = np.concatenate([pos_b[:, 0], neg_b[:, 0]])
    i2 = np.concatenate([pos_b[:, 1], neg_b[:, 1]])
    x1, x2 = ds.view1[i1], ds.view2[i2]

    def loss():
        f = bnn_output(reference, x1, x2)
        return loss_bnn(loss_pair(f[: len(pos_b)], 0), loss_pair(f[len(pos_b):], 1), cfg.alpha)

    left = reference.parameters("left")
    grads = numerical_grad(loss, left, eps=1e-6)
    expected = [p.data - cfg.lr * g for p, g in zip(left, grads)]

    train_epoch(model, ds, cfg, state)
    assert len(state.history) == 1
    for p, e in zip(model.parameters("left"), expected):
        np.testing.assert_allclose(p.data, e, rtol=1e-7, atol=1e-9)


def test_recorded_loss_matches_recomputation():
    ds = tiny_data(n=12, seed=4)
    model = BnnModel(TINY, seed=5)
    snapshot = copy.deepcopy(model).train()
    cfg = TrainConfig(lr=0.2, batch_size=10, alpha=0.8)
    state = TrainState.fresh(6)
    rng = copy.deepcopy(state.rng)
    neg = sample_negatives(ds, cfg.np_ratio, rng)
    pos_b, neg_b = next(batch_iter(make_positive_pairs(ds), neg, cfg.batch_size, rng))
    i1 = np.concatenate([pos_b[:, 0], neg_b[:, 0]])
    i2 = np.concatenate([pos_b[:, 1], neg_b[:, 1]])
    with no_grad():
        _, l_bnn, _, _ = batch_losses(snapshot, ds.view1[i1], ds.view2[i2], len(pos_b), cfg.alpha)
    train_epoch(model, ds, cfg, state)
    assert state.history[0].l_bnn == pytest.approx(l_bnn.item(), rel=1e-12)


def test_alternating_differs_from_joint_update():
    ds = tiny_data(n=10)
    runs = []
    for joint in (False, True):
        model = BnnModel(TINY, seed=7)
        train_epoch(model, ds, TrainConfig(lr=0.5, batch_size=10, joint_update=joint), TrainState.fresh(0))
        runs.append(model.right.fc_weight.data.copy())
    assert not np.array_equal(*runs)


def test_history_invariants():
    ds = tiny_data(n=20)
    state = fit(BnnModel(TINY, seed=8), ds, TrainConfig(lr=0.1, batch_size=12, epochs=3), TrainState.fresh(0))
    assert state.epoch == 3
    assert len(state.history) == 3 * 5
    assert all(np.isfinite(r.l_bnn) and r.l_bnn >= 0 for r in state.history)


def test_on_epoch_can_stop_early():
    seen = []

    def stop_after_two(model, state):
        seen.append(state.epoch)
        return state.epoch == 2

    state = fit(BnnModel(TINY, seed=8), tiny_data(n=20), TrainConfig(lr=0.1, batch_size=12, epochs=5),
                TrainState.fresh(0), on_epoch=stop_after_two)
    assert seen == [1, 2] and state.epoch == 2


def test_training_makes_progress():
    ds = synth_two_view(latent_dim=2, dims=(12, 8), noise=0.05, n_samples=100, seed=1, linear=True)
    cfg_l = TowerConfig.for_sequences(12, representation_dim=4)
    cfg_r = TowerConfig.for_sequences(8, representation_dim=4)
    state = fit(BnnModel(cfg_l, cfg_r, seed=0), ds, TrainConfig(lr=0.2, batch_size=50, epochs=50), TrainState.fresh(0))
    means = state.epoch_means()
    assert len(means) == 50
    assert means[-1] < means[0]


def test_divergence_reports_batch():
    ds = tiny_data(n=6)
    model = BnnModel(TINY, seed=9)
    model.left.fc_weight.data[0, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train_epoch(model, ds, TrainConfig(batch_size=6), TrainState.fresh(0))
    assert info.value.batch_index == 0 and info.value.epoch == 0


def test_shape_and_mode_checks():
    with pytest.raises(DimensionError):
        train_epoch(BnnModel(TowerConfig(representation_dim=3)), tiny_data(), TrainConfig(), TrainState.fresh(0))
    with pytest.raises(ModeError):
        train_epoch(BnnModel(TINY), tiny_data(), TrainConfig(mode="bnn+reconstruction"), TrainState.fresh(0))


def test_same_label_epoch_runs():
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    ds = tiny_data(n=8, labels=labels, pairing="same_label")
    state = train_epoch(BnnModel(TINY, seed=1), ds, TrainConfig(lr=0.1, batch_size=8), TrainState.fresh(0))
    assert len(state.history) > 0


def tiny_recon(seed=0):
    dec = DecoderConfig(representation_dim=3, output_shape=VIEW, seed_shape=(2, 2, 2), filters=(2, 2))
    return ReconModel(BnnModel(TINY, seed=seed), dec, dec, seed=seed + 1)


def test_reconstruction_mode_records_all_terms():
    state = train_epoch(tiny_recon(), tiny_data(n=8), TrainConfig(lr=0.05, batch_size=8, mode="bnn+reconstruction"),
                        TrainState.fresh(0))
    r = state.history[0]
    assert r.l_self > 0 and r.l_cross > 0


def test_reconstruction_mode_updates_decoders():
    model = tiny_recon()
    before = model.left_decoder.fc_weight.data.copy()
    train_epoch(model, tiny_data(n=8), TrainConfig(lr=0.05, batch_size=8, mode="bnn+reconstruction"),
                TrainState.fresh(0))
    assert not np.array_equal(before, model.left_decoder.fc_weight.data)


# ---------------------------------------------------------------- determinism and checkpoints


def test_fixed_seed_reproduces_loss_csv(tmp_path):
    blobs = []
    for k in range(2):
        state = fit(BnnModel(TINY, seed=3), tiny_data(n=16), TrainConfig(lr=0.2, batch_size=8, epochs=2),
                    TrainState.fresh(4))
        path = tmp_path / f"log{k}.csv"
        write_loss_log(path, state.history)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]
    assert blobs[0].startswith(b"# schema: bridgenet.train_log v1\nepoch,batch,l_bnn,l_self,l_cross\n")


def test_checkpoint_round_trip(tmp_path):
    model = tiny_recon(2)
    state = fit(model, tiny_data(n=8), TrainConfig(lr=0.05, batch_size=8, epochs=1, mode="bnn+reconstruction"),
                TrainState.fresh(1))
    path = tmp_path / "m.bnn"
    checkpoint_save(model, state, path, TrainConfig(mode="bnn+reconstruction"), extra={"note": "x"})
    loaded, loaded_state, meta = checkpoint_load(path)
    assert isinstance(loaded, ReconModel)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, loaded.state_dict()[k])
    assert loaded_state.rng.bit_generator.state == state.rng.bit_generator.state
    assert loaded_state.history == state.history
    assert meta["train_config"].mode == "bnn+reconstruction" and meta["extra"] == {"note": "x"}
    assert checkpoint_bytes(loaded, loaded_state, meta["train_config"], meta["extra"]) == path.read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = tiny_data(n=16)
    cfg = TrainConfig(lr=0.2, batch_size=8, epochs=2)
    straight = BnnModel(TINY, seed=6)
    full = fit(straight, ds, cfg, TrainState.fresh(7))

    first = BnnModel(TINY, seed=6)
    half = fit(first, ds, TrainConfig(lr=0.2, batch_size=8, epochs=1), TrainState.fresh(7))
    checkpoint_save(first, half, tmp_path / "half.bnn", cfg)
    resumed, state, _ = checkpoint_load(tmp_path / "half.bnn")
    fit(resumed, ds, cfg, state)
    for k, v in straight.state_dict().items():
        np.testing.assert_array_equal(v, resumed.state_dict()[k])
    assert [r.l_bnn for r in state.history] == [r.l_bnn for r in full.history]


def test_corrupt_checkpoint_rejected(tmp_path):
    path = tmp_path / "m.bnn"
    checkpoint_save(BnnModel(TINY), TrainState.fresh(0), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(path)


def test_checkpoint_version_mismatch(tmp_path):
    import hashlib
    import struct

    path = tmp_path / "m.bnn"
    checkpoint_save(BnnModel(TINY), None, path)
    body = bytearray(path.read_bytes()[:-32])
    struct.pack_into("<I", body, 8, 99)
    path.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(CheckpointError, match="version 99"):
        checkpoint_load(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"hello world" * 10)
    with pytest.raises(CheckpointError):
        checkpoint_load(path)
