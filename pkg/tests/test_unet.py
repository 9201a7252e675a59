"""Forward-pass equivalence against the literal recursion, gradient checks,
training-step contracts, and checkpoint round trips."""

import numpy as np
import pytest

from conftest import block_ref, central_diff, model_arrays, recursion_ref, rel_err
from skipscale.autodiff import InvalidArgumentError, ShapeError, Tape, Tensor
from skipscale.checkpoint import load_checkpoint, save_checkpoint
from skipscale.diffusion import make_linear_schedule, uniform_source
from skipscale.optim import SGD, AdamW
from skipscale.rng import Rng
from skipscale.scaling import (
    GeometricScaling,
    LearnableScaling,
    ReverseGeometricScaling,
    UnitScaling,
    UniversalScaling,
)
from skipscale.unet import (
    BlockParams,
    TrainingDivergence,
    UNetModel,
    init_unet,
    train_step,
    unet_forward,
)


def small_model(m=4, l=2, N=3, policy=None, seed=7):
    return init_unet(m, l, N, policy or UnitScaling(), Rng(seed, 0))


# ---------------------------------------------------------------------------
# init_unet
# ---------------------------------------------------------------------------

def test_init_matrix_count():
    model = init_unet(64, 2, 8, UnitScaling(), Rng(1, 0))
    assert len(model.parameters()) == 2 * 8 * 2 + 2


def test_init_same_seed_identical():
    a = init_unet(8, 2, 2, UnitScaling(), Rng(5, 3))
    b = init_unet(8, 2, 2, UnitScaling(), Rng(5, 3))
    for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()


def test_init_pooled_variance_matches_fan_in():
    model = init_unet(64, 2, 8, UnitScaling(), Rng(9, 1))
    pooled = np.concatenate([p.data.ravel() for _, p in model.parameters()])
    target = 2.0 / 64
    assert abs(pooled.var() - target) / target < 0.05


def test_init_size_validation():
    with pytest.raises(InvalidArgumentError):
        init_unet(1, 2, 2, UnitScaling(), Rng(0, 0))
    with pytest.raises(InvalidArgumentError):
        init_unet(4, 1, 2, UnitScaling(), Rng(0, 0))
    with pytest.raises(InvalidArgumentError):
        init_unet(4, 2, 0, UnitScaling(), Rng(0, 0))


def test_init_learnable_requires_divisible_width():
    policy = LearnableScaling.build(channels=16, rng=Rng(3, 3))
    with pytest.raises(InvalidArgumentError):
        init_unet(36, 2, 2, policy, Rng(0, 0))


# ---------------------------------------------------------------------------
# unet_forward against the literal recursion
# ---------------------------------------------------------------------------

def test_forward_single_level_hand_unrolled():
    # depth-1 blocks on 2x2 matrices, evaluated by hand
    w_a = np.array([[1.0, 2.0], [3.0, 4.0]])
    w_f = np.array([[0.0, 1.0], [1.0, 0.0]])
    w_b = np.array([[1.0, 0.0], [0.0, 2.0]])
    model = UNetModel(
        m=2, l=1, N=1,
        encoders=[BlockParams([Tensor(w_a)])],
        decoders=[BlockParams([Tensor(w_b)])],
        middle=BlockParams([Tensor(w_f)]),
        policy=UniversalScaling(0.5),
    )
    x = np.array([1.0, -1.0])
    trace = unet_forward(model, Tensor(x))
    # enc: [-1, -1]; middle: [-1, -1]; 0.5*enc + middle = [-1.5, -1.5]; dec: [-1.5, -3.0]
    assert np.array_equal(trace.output.data, [-1.5, -3.0])
    by_hand = w_b @ (0.5 * (w_a @ x) + w_f @ (w_a @ x))
    assert np.array_equal(trace.output.data, by_hand)


def test_forward_zero_weights_zero_output():
    model = small_model()
    for _, p in model.parameters():
        p.data[:] = 0.0
    out = unet_forward(model, Tensor(np.ones(4))).output
    assert np.array_equal(out.data, np.zeros(4))


@pytest.mark.parametrize("policy", [
    UnitScaling(),
    UniversalScaling(1 / np.sqrt(2)),
    GeometricScaling(0.5),
    ReverseGeometricScaling(0.5),
])
def test_forward_matches_recursive_oracle(policy):
    rng = Rng(17, 4)
    for m, l, N in [(4, 2, 3), (8, 3, 4), (6, 2, 1), (3, 3, 2)]:
        model = init_unet(m, l, N, policy, rng.child(m * 100 + l * 10 + N))
        x = rng.child(m + l + N).standard_normal(m)
        trace = unet_forward(model, Tensor(x))
        enc, dec, mid = model_arrays(model)
        expect = recursion_ref(enc, dec, mid, policy.coefficients(N), x)
        denom = max(1.0, np.abs(expect).max())
        assert np.abs(trace.output.data - expect).max() / denom < 1e-12


def test_forward_trace_contents():
    model = small_model(m=4, l=2, N=3, policy=GeometricScaling(0.5))
    x = Rng(3, 1).standard_normal(4)
    trace = unet_forward(model, Tensor(x))
    assert len(trace.hidden) == 3
    assert len(trace.skip_inputs) == 3
    assert trace.coefficients_used == [1.0, 0.5, 0.25]
    assert all(k > 0 for k in trace.coefficients_used)
    # hidden[-1] is the output-level feature
    assert trace.hidden[-1] is trace.output
    # skip_inputs[0] is the first encoder image of x
    enc, _, _ = model_arrays(model)
    assert np.allclose(trace.skip_inputs[0].data, block_ref(enc[0], x), rtol=1e-15)


def test_forward_zero_coefficients_equal_plain_composition():
    # with every skip zeroed, the recursion collapses to dec(...(middle(enc(x))))
    rng = Rng(23, 0)
    model = small_model(m=5, l=2, N=3, seed=23)
    x = rng.standard_normal(5)
    enc, dec, mid = model_arrays(model)
    zeroed = recursion_ref(enc, dec, mid, [0.0, 0.0, 0.0], x)
    h = x
    for b in enc:
        h = block_ref(b, h)
    h = block_ref(mid, h)
    for b in reversed(dec):
        h = block_ref(b, h)
    assert np.abs(zeroed - h).max() < 1e-12 * max(1.0, np.abs(h).max())


def test_forward_learnable_policy_coefficients_in_unit_interval():
    policy = LearnableScaling.build(channels=4, rng=Rng(31, 1), r=2)
    model = init_unet(8, 2, 3, policy, Rng(31, 2))
    trace = unet_forward(model, Tensor(Rng(31, 3).standard_normal(8)))
    assert len(trace.coefficients_used) == 3
    assert all(0.0 < k < 1.0 for k in trace.coefficients_used)


def test_forward_shape_error():
    model = small_model()
    with pytest.raises(ShapeError):
        unet_forward(model, Tensor(np.zeros(5)))


def test_forward_batch_columns_match_single():
    model = small_model(m=6, l=2, N=2, seed=11)
    batch = Rng(12, 0).standard_normal((6, 4))
    full = unet_forward(model, Tensor(batch)).output.data
    for j in range(4):
        single = unet_forward(model, Tensor(batch[:, j])).output.data
        assert np.abs(full[:, j] - single).max() < 1e-12 * max(1.0, np.abs(single).max())


# ---------------------------------------------------------------------------
# full-model gradient check
# ---------------------------------------------------------------------------

def full_model_fd_check(seed: int, policy=None, m=6, l=2, N=2) -> float:
    """Max relative error between tape gradients and central differences."""
    model = init_unet(m, l, N, policy or UnitScaling(), Rng(seed, 100))
    rng = Rng(seed, 200)
    x = rng.standard_normal(m)
    target = rng.standard_normal(m)
    with Tape() as tape:
        trace = unet_forward(model, Tensor(x))
        from skipscale.autodiff import sub, sum_of_squares
        loss = sum_of_squares(sub(trace.output, Tensor(target)))
        tape.backward(loss)
    enc, dec, mid = model_arrays(model)

    def f():
        if isinstance(model.policy, LearnableScaling):
            out = unet_forward(model, Tensor(x)).output.data
        else:
            out = recursion_ref(enc, dec, mid, model.policy.coefficients(N), x)
        return float(((out - target) ** 2).sum())

    worst = 0.0
    for name, p in model.parameters():
        fd = central_diff(f, p.data)
        worst = max(worst, float(rel_err(p.grad, fd, floor=1e-5).max()))
    return worst


def test_full_model_gradients_match_finite_differences():
    for seed in (0, 1, 2):
        assert full_model_fd_check(seed) < 1e-5


def test_full_model_gradients_learnable_policy():
    policy = LearnableScaling.build(channels=3, rng=Rng(77, 1), r=1)
    assert full_model_fd_check(5, policy=policy, m=6) < 1e-5


# ---------------------------------------------------------------------------
# train_step
# ---------------------------------------------------------------------------

def setup_training(policy=None, m=8, N=2, batch=4, lr=2e-4, seed=42):
    model = init_unet(m, 2, N, policy or UnitScaling(), Rng(seed, 0))
    sched = make_linear_schedule(100, 1e-3, 0.05)
    data = uniform_source(m)
    opt = AdamW(lr=lr)
    return model, sched, data, opt


def test_train_step_zero_lr_keeps_parameters():
    model, sched, data, _ = setup_training()
    opt = AdamW(lr=0.0)
    before = [p.data.copy() for _, p in model.parameters()]
    report = train_step(model, data.sample(4, Rng(1, 1)), sched, opt, Rng(1, 2))
    assert np.isfinite(report.loss)
    for (name, p), prev in zip(model.parameters(), before):
        assert np.array_equal(p.data, prev), name


def test_train_step_frozen_group_absent_from_grad_norms():
    model, sched, data, opt = setup_training()
    model.encoders[0].weights[0].requires_grad = False
    report = train_step(model, data.sample(4, Rng(2, 1)), sched, opt, Rng(2, 2))
    assert "enc1.w1" not in report.grad_norms
    assert "enc1.w2" in report.grad_norms


def test_train_step_loss_decreases_over_200_steps():
    # median over 5 seeds of (final smoothed loss < first loss)
    sched = make_linear_schedule(1000, 1e-4, 0.02)
    wins = 0
    for seed in range(5):
        model = init_unet(64, 2, 8, UnitScaling(), Rng(seed, 10))
        data = uniform_source(64)
        opt = AdamW(lr=2e-4)
        data_rng, step_rng = Rng(seed, 11), Rng(seed, 12)
        losses = [
            train_step(model, data.sample(16, data_rng), sched, opt, step_rng).loss
            for _ in range(200)
        ]
        if np.mean(losses[-20:]) < losses[0]:
            wins += 1
    assert wins >= 3


def test_train_step_reports_feature_norms_indexed_by_level():
    model, sched, data, opt = setup_training(N=3)
    report = train_step(model, data.sample(4, Rng(3, 1)), sched, opt, Rng(3, 2))
    assert len(report.feature_norms) == 3
    assert all(v >= 0 for v in report.feature_norms)


def test_train_step_divergence_raises_with_report():
    model, sched, data, opt = setup_training()
    model.middle.weights[0].data *= 1e200  # force an overflow in the forward
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergence) as exc_info:
            train_step(model, data.sample(4, Rng(4, 1)), sched, opt, Rng(4, 2))
    assert not np.isfinite(exc_info.value.report.loss)


def test_train_step_learnable_policy_updates_calibrator():
    policy = LearnableScaling.build(channels=4, rng=Rng(55, 1), r=2)
    model, sched, data, opt = setup_training(policy=policy)
    before = policy.calib.w1.data.copy()
    train_step(model, data.sample(4, Rng(5, 1)), sched, opt, Rng(5, 2))
    assert not np.array_equal(policy.calib.w1.data, before)


def test_sgd_step_moves_against_gradient():
    model, sched, data, _ = setup_training()
    opt = SGD(lr=1e-3)
    before = [p.data.copy() for _, p in model.parameters()]
    train_step(model, data.sample(4, Rng(6, 1)), sched, opt, Rng(6, 2))
    changed = sum(
        not np.array_equal(p.data, prev)
        for (_, p), prev in zip(model.parameters(), before)
    )
    assert changed == len(before)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("policy_factory", [
    lambda: UnitScaling(),
    lambda: UniversalScaling(1 / np.sqrt(2)),
    lambda: GeometricScaling(0.7),
    lambda: ReverseGeometricScaling(0.5),
    lambda: LearnableScaling.build(channels=4, rng=Rng(66, 1), r=2),
    lambda: LearnableScaling.build(channels=4, rng=Rng(66, 2), r=2, connections=3),
])
def test_checkpoint_round_trip_bit_exact(tmp_path, policy_factory):
    policy = policy_factory()
    model = init_unet(8, 2, 3, policy, Rng(13, 1))
    path = str(tmp_path / "model.npz")
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert (loaded.m, loaded.l, loaded.N) == (8, 2, 3)
    assert loaded.policy.describe() == model.policy.describe()
    orig = dict(model.parameters())
    for name, p in loaded.parameters():
        assert p.data.tobytes() == orig[name].data.tobytes(), name
    # loaded model computes identically
    x = Rng(14, 1).standard_normal(8)
    a = unet_forward(model, Tensor(x)).output.data
    b = unet_forward(loaded, Tensor(x)).output.data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_rejects_unknown_version(tmp_path):
    model = init_unet(4, 2, 1, UnitScaling(), Rng(15, 1))
    path = str(tmp_path / "model.npz")
    save_checkpoint(model, path)
    import json

    import numpy as np

    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays["meta"]))
    meta["format_version"] = 999
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    with pytest.raises(InvalidArgumentError):
        load_checkpoint(path)
