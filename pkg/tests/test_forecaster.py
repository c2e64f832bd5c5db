import numpy as np
import pytest

from crowdnav import nn
from crowdnav.evalbench import evaluate_windows, prediction_metrics
from crowdnav.fields import RHO, SIGMA2, FieldSequence, GridSpec, Trajectory, rasterize_sequence
from crowdnav.forecaster import (
    WEIGHT_FLOOR,
    AdvectionPredictor,
    Forecaster,
    ForecasterPredictor,
    LossError,
    LossWeights,
    ModelConfig,
    OmniscientPredictor,
    PersistencePredictor,
    density_weighted_loss,
    load_model,
    model_checkpoint_bytes,
    predict_advection,
    predict_persistence,
    train,
)
from crowdnav.ingest import IngestConfig, window_dataset
from crowdnav.sim import make_corpus, simulate

SPEC = GridSpec()
TINY = ModelConfig(enc_channels=(4, 8), hidden_channels=8, k=3, tau=2)
UNIT = LossWeights.from_realized([1.0, 1.0, 1.0, 1.0])


def one_cell(rho=1.0, vx=0.0, vy=0.0, s2=0.0, r=4, c=7):
    data = np.zeros((1, 12, 36, 4))
    data[0, r, c] = [rho, vx, vy, s2]
    return data


def random_input(rng, t=3):
    data = np.zeros((t, 12, 36, 4))
    occ = rng.random((t, 12, 36)) < 0.3
    data[occ] = np.column_stack([rng.uniform(0.1, 2, occ.sum()), rng.normal(size=(occ.sum(), 2)), rng.uniform(0, 1, occ.sum())])
    return FieldSequence(SPEC, data, start_index=5)


def blob_windows(seed, k=3, tau=2, stride=3, duration=40.0):
    trajs = simulate(make_corpus("blob", seed, duration=duration)[0])
    return window_dataset(trajs, IngestConfig(SPEC, k=k, tau=tau, stride=stride), t0=0.0)


def moving_column_sequence(n_frames, start_col=3, width=1):
    """A block of pedestrians, ``width`` columns wide, moving +x one cell per frame."""
    t = np.arange(float(n_frames))
    trajs = [
        Trajectory(
            r * width + c,
            t,
            np.column_stack([start_col + c + 0.5 + t, np.full(n_frames, r + 0.5)]),
            np.tile([1.0, 0.0], (n_frames, 1)),
        )
        for r in range(3, 9)
        for c in range(width)
    ]
    return rasterize_sequence(trajs, SPEC, 0.0, n_frames)


# --------------------------------------------------------------------------
# forward


def test_forward_shape_and_non_negative_heads(rng):
    model = Forecaster(TINY, seed=1)
    seq = random_input(rng)
    out = model.predict(seq)
    assert out.data.shape == (2, 12, 36, 4)
    assert out.start_index == seq.end_index and out.spec == seq.spec
    assert (out.data[..., RHO] >= 0).all() and (out.data[..., SIGMA2] >= 0).all()


def test_raw_heads_are_softplus_positive(rng):
    model = Forecaster(TINY, seed=2)
    (frame,) = model.forward_tensor(rng.normal(size=(2, 3, 4, 12, 36)), 1)
    assert (frame.data[:, 0] > 0).all() and (frame.data[:, 3] > 0).all()


def test_variable_rollout_length(rng):
    model = Forecaster(TINY)
    assert len(model.predict(random_input(rng), tau=5)) == 5


def test_forward_rejects_mismatched_input(rng):
    model = Forecaster(TINY)
    with pytest.raises(ValueError):
        model.forward_tensor(rng.normal(size=(1, 3, 3, 12, 36)))
    with pytest.raises(ValueError):
        model.forward_tensor(rng.normal(size=(1, 3, 4, 10, 36)))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(height=10)
    with pytest.raises(ValueError):
        ModelConfig(k=0)
    deep = ModelConfig.deep()
    assert deep.n_layers == 3 and deep.hidden_channels == 128


def test_default_architecture_parameter_shapes():
    shapes = {p.name: p.shape for p in Forecaster(ModelConfig()).params()}
    assert shapes["enc1.weight"] == (16, 4, 3, 3)
    assert shapes["enc2.weight"] == (64, 16, 3, 3)
    assert shapes["lstm0.weight"] == (256, 128, 3, 3)
    assert shapes["dec1.weight"] == (64, 16, 4, 4)
    assert shapes["dec2.weight"] == (16, 4, 4, 4)


# --------------------------------------------------------------------------
# loss


def test_perfect_prediction_has_zero_loss(rng):
    seq = random_input(rng)
    assert density_weighted_loss(seq, seq, UNIT) == 0.0


def test_density_error_in_one_cell():
    assert density_weighted_loss(one_cell(rho=0.5), one_cell(rho=1.0), UNIT) == pytest.approx(0.125)


def test_density_and_velocity_error_in_one_cell():
    pred = one_cell(rho=0.5, vx=2.0)
    assert density_weighted_loss(pred, one_cell(rho=1.0), UNIT) == pytest.approx(1.625)


def test_empty_target_is_an_error():
    with pytest.raises(LossError):
        density_weighted_loss(one_cell(), np.zeros((1, 12, 36, 4)), UNIT)


def test_loss_ignores_cells_empty_in_target():
    pred = one_cell() + one_cell(rho=3.0, vx=5.0, r=0, c=0)
    assert density_weighted_loss(pred, one_cell(), UNIT) == 0.0


def test_doubling_density_doubles_velocity_term():
    base_t, base_p = one_cell(rho=0.5), one_cell(rho=0.5, vx=0.4, s2=0.3)
    dbl_t, dbl_p = one_cell(rho=1.0), one_cell(rho=1.0, vx=0.4, s2=0.3)
    # align the density error so only the weighted terms differ
    dbl_p[0, 4, 7, RHO] = 1.0
    assert density_weighted_loss(dbl_p, dbl_t, UNIT) == pytest.approx(2 * density_weighted_loss(base_p, base_t, UNIT), rel=1e-12)


def test_loss_is_non_negative(rng):
    for _ in range(5):
        a, b = random_input(rng), random_input(rng)
        assert density_weighted_loss(a, b, LossWeights(rng.normal(size=4))) >= 0.0


def test_feature_scale_divides_velocity():
    pred = one_cell(vx=2.0)
    assert density_weighted_loss(pred, one_cell(), UNIT, feature_scale=(1, 2, 2, 1)) == pytest.approx(0.5)


def test_realized_weights_have_floor():
    w = LossWeights(np.array([-50.0, 0.0, 3.0, -1e3]))
    assert (w.realized() >= WEIGHT_FLOOR).all()
    np.testing.assert_allclose(LossWeights.from_realized([0.5, 1, 2, 3]).realized(), [0.5, 1, 2, 3])


# --------------------------------------------------------------------------
# training


@pytest.fixture(scope="module")
def blob_training():
    windows = blob_windows(0) + blob_windows(1)
    model = Forecaster(TINY, seed=0)
    return train(model, windows, epochs=5, lr=3e-3, batch=4, seed=0)


def test_training_descends_on_blob(blob_training):
    h = blob_training.history
    assert [r.epoch for r in h] == list(range(6))
    assert h[5].train_loss < h[0].train_loss


def test_loss_weights_stay_above_floor(blob_training):
    for rec in blob_training.history:
        assert min(rec.weights) >= WEIGHT_FLOOR


def test_training_log_csv(blob_training):
    lines = blob_training.log_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,w_rho,w_vx,w_vy,w_sigma"
    assert len(lines) == 7 and len(lines[1].split(",")) == 7


def test_training_is_deterministic():
    windows = blob_windows(2)[:6]
    a = train(Forecaster(TINY, seed=3), windows, epochs=2, seed=5)
    b = train(Forecaster(TINY, seed=3), windows, epochs=2, seed=5)
    assert model_checkpoint_bytes(a.model, a.weights) == model_checkpoint_bytes(b.model, b.weights)


def test_training_needs_windows():
    with pytest.raises(ValueError):
        train(Forecaster(TINY), [], epochs=1)


def test_checkpoint_round_trip_restores_predictions(rng, tmp_path):
    model = Forecaster(TINY, seed=9)
    weights = LossWeights(rng.normal(size=4))
    path = tmp_path / "m.ckpt"
    path.write_bytes(model_checkpoint_bytes(model, weights))
    back, back_w = load_model(path, k=3, tau=2)
    assert back.config == TINY
    np.testing.assert_array_equal(back_w.theta.data, weights.theta.data)
    seq = random_input(rng)
    np.testing.assert_array_equal(back.predict(seq).data, model.predict(seq).data)


def test_load_model_infers_deep_layout():
    deep = ModelConfig.deep(enc_channels=(4, 8), hidden_channels=4, k=3, tau=2)
    back, weights = load_model(model_checkpoint_bytes(Forecaster(deep)), k=3, tau=2)
    assert back.config == deep and weights is None


def test_load_model_rejects_foreign_checkpoint():
    with pytest.raises(nn.CheckpointError):
        load_model(nn.checkpoint_bytes([nn.Param("w", np.ones(2))]))


# --------------------------------------------------------------------------
# baselines


def test_persistence_is_exact_on_static_crowd(rng):
    frame = random_input(rng, t=1).data
    seq = FieldSequence(SPEC, np.repeat(frame, 4, axis=0))
    pred = predict_persistence(seq.slice(0, 2), 2)
    assert pred.spec == seq.spec and pred.start_index == 2
    np.testing.assert_array_equal(pred.data, seq.data[2:])


def test_persistence_error_grows_with_horizon():
    seq = moving_column_sequence(20, width=6)
    pred = predict_persistence(seq.slice(0, 5), 8)
    target = seq.slice(5, 13)
    errs = [prediction_metrics(pred.data[h], target.data[h]).density_mae for h in range(8)]
    assert all(b >= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] > errs[0]


def test_advection_of_zero_velocity_is_persistence(rng):
    seq = random_input(rng)
    seq = FieldSequence(SPEC, seq.data * np.array([1, 0, 0, 1]), seq.start_index)
    np.testing.assert_array_equal(predict_advection(seq, 3).data, predict_persistence(seq, 3).data)


def test_advection_translates_unit_velocity_blob():
    seq = moving_column_sequence(10)
    pred = predict_advection(seq.slice(0, 1), 5)
    np.testing.assert_allclose(pred.data, seq.data[1:6], atol=1e-12)
    for frame in pred.data:
        assert abs(frame[..., RHO].sum() - seq.data[0, ..., RHO].sum()) < 1e-6


def test_advection_beats_persistence_on_blob():
    windows = [w for s in range(3) for w in blob_windows(s, k=10, tau=10, stride=10, duration=60.0)]
    adv = evaluate_windows(predict_advection, windows, horizon=10)
    per = evaluate_windows(predict_persistence, windows, horizon=10)
    assert adv.density_mae < per.density_mae


@pytest.mark.parametrize("make", [PersistencePredictor, AdvectionPredictor, lambda: ForecasterPredictor(Forecaster(TINY))])
def test_predictor_postconditions(make, rng):
    seq = random_input(rng)
    out = make().predict(seq, 2)
    assert out.spec == seq.spec and len(out) == 2
    assert (out.data[..., RHO] >= 0).all() and (out.data[..., SIGMA2] >= 0).all()


def test_omniscient_returns_known_future():
    world = moving_column_sequence(12)
    pred = OmniscientPredictor(world).predict(world.slice(0, 4), 3)
    np.testing.assert_array_equal(pred.data, world.data[4:])
    tail = OmniscientPredictor(world).predict(world.slice(8, 12), 3)
    np.testing.assert_array_equal(tail.data, np.repeat(world.data[-1:], 3, axis=0))
