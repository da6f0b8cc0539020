import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tnfs.errors import DivergenceError, InvalidArgumentError, NumericOverflowError
from tnfs.model import WIDTH_FLOOR, TnfsModel, rollout
from tnfs.training import (GradientSet, TrainConfig, TrainingSequence, analytic_gradients,
                           finite_difference_gradients, gradient_step, loss_and_gradients,
                           mse_loss, random_model, relative_errors, train)


def desk_problem(seed, N=2, M=1, P=1, R=3, T=5, n_seq=1):
    rng = np.random.default_rng(seed)
    model = random_model(N, M, P, R, rng)
    data = [TrainingSequence(rng.normal(size=(T, M)), rng.normal(size=(T, P)))
            for _ in range(n_seq)]
    return model, data


def test_perfect_fit_has_zero_loss_and_gradient():
    model, data = desk_problem(0)
    _, y = rollout(model, data[0].inputs)
    fit = [TrainingSequence(data[0].inputs, y)]
    assert mse_loss(model, fit) == 0.0
    g = analytic_gradients(model, fit)
    assert np.max(np.abs(g.flat())) < 1e-10


def test_single_step_loss_by_hand():
    model = TnfsModel(np.zeros((1, 2)), np.ones((1, 2)), [[[0.0]]], [[[1.0]]], [[1.0]])
    assert mse_loss(model, [TrainingSequence([[1.0]], [[3.0]])]) == 4.0


def test_loss_is_quadratic_in_error():
    model, data = desk_problem(1)
    _, y = rollout(model, data[0].inputs)
    e = data[0].targets - y
    twice = [TrainingSequence(data[0].inputs, y + 2 * e)]
    assert np.isclose(mse_loss(model, twice), 4 * mse_loss(model, data), rtol=1e-12)


def test_empty_data_rejected():
    model, _ = desk_problem(2)
    with pytest.raises(InvalidArgumentError):
        mse_loss(model, [])


def test_weights_select_scored_steps():
    model, data = desk_problem(3, T=4)
    seq = data[0]
    w = np.array([0.0, 0.0, 0.0, 1.0])
    _, y = rollout(model, seq.inputs)
    weighted = mse_loss(model, [TrainingSequence(seq.inputs, seq.targets, weights=w)])
    assert np.isclose(weighted, float(np.sum((y[-1] - seq.targets[-1]) ** 2)), rtol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    model, data = desk_problem(seed)
    err = relative_errors(analytic_gradients(model, data),
                          finite_difference_gradients(model, data, 1e-5))
    assert err.max() <= 1e-4


def test_weighted_gradients_match_finite_differences():
    model, data = desk_problem(7, N=3, M=2, P=2, R=2, T=4, n_seq=2)
    w = np.array([0.0, 0.5, 0.0, 2.0])
    data = [TrainingSequence(s.inputs, s.targets, weights=w) for s in data]
    err = relative_errors(analytic_gradients(model, data), finite_difference_gradients(model, data))
    assert err.max() <= 1e-4


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 4), st.integers(1, 8))
def test_gradient_property_over_shapes(seed, N, M, P, R, T):
    model, data = desk_problem(seed, N, M, P, R, T)
    err = relative_errors(analytic_gradients(model, data), finite_difference_gradients(model, data))
    assert err.max() <= 1e-4


def test_tied_rules_get_equal_consequent_gradients():
    model, data = desk_problem(8)
    model.centers[1] = model.centers[0]
    model.widths[1] = model.widths[0]
    model.A[1] = model.A[0]
    model.B[1] = model.B[0]
    g = analytic_gradients(model, data)
    assert np.allclose(g.A[0], g.A[1], rtol=0, atol=1e-15)
    assert np.allclose(g.B[0], g.B[1], rtol=0, atol=1e-15)


def test_scalar_recurrence_derivative():
    # one free A entry: x1 = a*x0, y = x1, loss = (a*x0 - t)^2
    a, x0, t = 0.7, 1.3, 0.2
    model = TnfsModel(np.zeros((1, 2)), np.ones((1, 2)), [[[a]]], [[[0.0]]], [[1.0]])
    data = [TrainingSequence([[0.0]], [[t]], x_init=[x0])]
    exact = 2 * (a * x0 - t) * x0
    fd = finite_difference_gradients(model, data, 1e-5).A[0, 0, 0]
    assert abs(fd - exact) < 1e-9
    assert abs(analytic_gradients(model, data).A[0, 0, 0] - exact) < 1e-12


def test_finite_difference_error_shrinks_quadratically():
    model, data = desk_problem(9)
    exact = analytic_gradients(model, data).centers[0, 0]
    e1 = abs(finite_difference_gradients(model, data, 1e-2).centers[0, 0] - exact)
    e2 = abs(finite_difference_gradients(model, data, 5e-3).centers[0, 0] - exact)
    assert 2.5 < e1 / e2 < 6.0


def test_zero_learning_rate_keeps_model():
    model, data = desk_problem(10)
    trained, history = train(model, data, TrainConfig(learning_rate=0.0, epochs=5))
    assert np.array_equal(flat(trained), flat(model))
    assert len({h.train_mse for h in history}) == 1
    assert len(history) == 6


def flat(m):
    return np.concatenate([m.centers.ravel(), m.widths.ravel(), m.A.ravel(), m.B.ravel(),
                           m.C.ravel()])


def test_small_step_decreases_loss():
    model, data = desk_problem(11)
    loss, g = loss_and_gradients(model, data)
    assert g.norm() > 1e-6
    decreased = False
    for lr in (1e-1, 1e-2, 1e-3, 1e-4):
        if mse_loss(gradient_step(model, g, lr), data) < loss:
            decreased = True
            break
    assert decreased


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_tiny_step_never_increases_loss_much(seed):
    model, data = desk_problem(seed)
    before = mse_loss(model, data)
    after, _ = train(model, data, TrainConfig(learning_rate=1e-6, epochs=1, grad_clip_norm=None))
    assert mse_loss(after, data) <= before + 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 5.0))
def test_widths_stay_above_floor(seed, lr):
    model, data = desk_problem(seed)
    model.widths[:] = 2 * WIDTH_FLOOR
    try:
        trained, _ = train(model, data, TrainConfig(learning_rate=lr, epochs=5))
    except DivergenceError:
        return
    assert np.all(trained.widths >= WIDTH_FLOOR)


def test_training_is_deterministic():
    model, data = desk_problem(12, n_seq=3)
    cfg = TrainConfig(learning_rate=0.05, epochs=20, validation_fraction=0.34, shuffle_seed=4)
    a, ha = train(model, data, cfg)
    b, hb = train(model, data, cfg)
    assert np.array_equal(flat(a), flat(b))
    assert [h.train_mse for h in ha] == [h.train_mse for h in hb]
    assert ha[-1].validation_mse is not None


def test_clipping_bounds_the_update():
    model, data = desk_problem(13)
    _, g = loss_and_gradients(model, data)
    cfg = TrainConfig(learning_rate=1.0, epochs=1, grad_clip_norm=1e-3)
    trained, _ = train(model, data, cfg)
    assert np.linalg.norm(flat(trained) - flat(model)) <= 1e-3 * (1 + 1e-12)
    assert g.norm() > 1e-3


def test_frozen_output_matrix():
    model, data = desk_problem(14)
    trained, _ = train(model, data, TrainConfig(0.1, 3, train_output_matrix=False))
    assert np.array_equal(trained.C, model.C)
    assert not np.array_equal(trained.A, model.A)


def test_divergence_is_reported():
    rng = np.random.default_rng(15)
    model = random_model(2, 1, 1, 1, rng)
    model.A[0] = 50 * np.eye(2)
    data = [TrainingSequence(rng.normal(size=(300, 1)), rng.normal(size=(300, 1)))]
    with pytest.raises(NumericOverflowError):
        loss_and_gradients(model, data)
    with pytest.raises(DivergenceError) as info:
        train(model, data, TrainConfig(0.1, 2))
    assert info.value.last_finite_epoch == -1


def test_teacher_student_halves_loss():
    rng = np.random.default_rng(16)
    teacher = random_model(2, 1, 1, 2, rng, consequent_scale=0.5)
    data = []
    for _ in range(4):
        U = rng.normal(size=(12, 1))
        data.append(TrainingSequence(U, rollout(teacher, U)[1]))
    student = random_model(2, 1, 1, 2, rng)
    _, history = train(student, data, TrainConfig(learning_rate=0.1, epochs=500))
    assert history[-1].train_mse <= 0.5 * history[0].train_mse


def test_gradient_set_helpers():
    model, data = desk_problem(17)
    g = analytic_gradients(model, data)
    assert np.isclose(g.scaled(2.0).norm(), 2 * g.norm())
    assert GradientSet.zeros_like(model).norm() == 0.0
    assert g.flat().size == flat(model).size
