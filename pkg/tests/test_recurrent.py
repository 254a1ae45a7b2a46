import numpy as np
import pytest

from conftest import rel_error
from sparselm.errors import ShapeMismatchError
from sparselm.services.autodiff import Tape, Tensor, backward, mul, total
from sparselm.services.optimization import Optimizer
from sparselm.services.recurrent import (
    LstmComponentParams,
    SparseLstmLayer,
    bilstm,
    detach_state,
    lstm_step,
    masked_dense_forward,
    pack_component_arrays,
    pack_dense_params,
    sparse_lstm_forward,
    stack,
    zero_state,
)
from sparselm.services.sparsity import count_lstm_params, expand_plan_to_masks, plan_recurrent_layer

KINDS = ("w_hi", "w_hh", "b_ih", "b_hh")


def random_plan(gen: np.random.Generator):
    i = int(gen.integers(2, 9))
    h = int(gen.integers(1, 9))
    n = int(gen.integers(1, h + 1))
    gamma = float(gen.uniform(0.3, 1.0))
    return plan_recurrent_layer(i, h, n, gamma)


def run_pair(plan, gen):
    layer = SparseLstmLayer(plan, gen)
    batch, steps = int(gen.integers(1, 4)), int(gen.integers(1, 5))
    xs = [gen.normal(size=(batch, plan.input_size)) for _ in range(steps)]
    readout = [gen.normal(size=(batch, plan.hidden_size)) for _ in range(steps)]

    def loss_of(outputs):
        terms = [total(mul(o, Tensor(r))) for o, r in zip(outputs, readout)]
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc

    sparse_inputs = [Tensor(x, requires_grad=True) for x in xs]
    with Tape() as tape:
        sparse_out, _ = sparse_lstm_forward(layer, sparse_inputs)
        sparse_loss = loss_of(sparse_out)
    backward(tape, sparse_loss)

    dense = pack_dense_params(layer)
    dense_inputs = [Tensor(x, requires_grad=True) for x in xs]
    with Tape() as tape:
        dense_out, _ = masked_dense_forward(plan, dense, expand_plan_to_masks(plan), dense_inputs)
        dense_loss = loss_of(dense_out)
    backward(tape, dense_loss)
    return layer, dense, sparse_inputs, dense_inputs, sparse_out, dense_out


def test_sparse_equals_masked_dense_over_random_triples():
    gen = np.random.default_rng(2024)
    for _ in range(120):
        plan = random_plan(gen)
        layer, dense, s_in, d_in, s_out, d_out = run_pair(plan, gen)
        for a, b in zip(s_out, d_out):
            assert np.max(np.abs(a.data - b.data)) < 1e-10
        for kind in KINDS:
            packed = pack_component_arrays(plan, [getattr(c, kind).grad for c in layer.components], kind)
            assert rel_error(packed, getattr(dense, kind).grad) < 1e-8
        for a, b in zip(s_in, d_in):
            assert rel_error(a.grad, b.grad) < 1e-8


def test_masked_dense_gradients_vanish_off_plan():
    gen = np.random.default_rng(5)
    plan = plan_recurrent_layer(6, 6, 3, 0.5)
    _, dense, *_ = run_pair(plan, gen)
    mask_hh, mask_hi = expand_plan_to_masks(plan)
    assert np.all(dense.w_hh.grad[np.tile(mask_hh, (4, 1)) == 0] == 0.0)
    assert np.all(dense.w_hi.grad[np.tile(mask_hi, (4, 1)) == 0] == 0.0)


def test_component_ignores_inputs_outside_its_window(rng):
    plan = plan_recurrent_layer(8, 4, 2, 0.5)
    layer = SparseLstmLayer(plan, rng)
    x = rng.normal(size=(2, 8))
    base, _ = sparse_lstm_forward(layer, [Tensor(x)])
    x2 = x.copy()
    x2[:, 4:] += 10.0  # only the second component reads columns 4..7
    moved, _ = sparse_lstm_forward(layer, [Tensor(x2)])
    np.testing.assert_array_equal(base[0].data[:, :2], moved[0].data[:, :2])
    assert not np.allclose(base[0].data[:, 2:], moved[0].data[:, 2:])


def test_parameter_count_matches_formula(rng):
    plan = plan_recurrent_layer(20, 12, 3, 0.4)
    layer = SparseLstmLayer(plan, rng)
    assert layer.parameter_count() == count_lstm_params(plan)


def test_masked_dense_rejects_inconsistent_masks(rng):
    plan = plan_recurrent_layer(6, 4, 2, 0.5)
    layer = SparseLstmLayer(plan, rng)
    mask_hh, mask_hi = expand_plan_to_masks(plan)
    with pytest.raises(ShapeMismatchError):
        masked_dense_forward(plan, pack_dense_params(layer), (np.ones_like(mask_hh), mask_hi), [Tensor(np.zeros((1, 6)))])


def test_input_shape_checked(rng):
    layer = SparseLstmLayer(plan_recurrent_layer(6, 4, 2, 0.5), rng)
    with pytest.raises(ShapeMismatchError):
        sparse_lstm_forward(layer, [Tensor(np.zeros((1, 5)))])


def test_weight_mask_zero_disables_recurrence(rng):
    plan = plan_recurrent_layer(3, 4, 2, 1.0)
    layer = SparseLstmLayer(plan, rng)
    xs = [Tensor(rng.normal(size=(1, 3))) for _ in range(3)]
    zero_masks = [np.zeros(shape) for shape in layer.recurrent_shapes()]
    masked, _ = sparse_lstm_forward(layer, xs, weight_masks=zero_masks)
    plain, _ = sparse_lstm_forward(layer, xs)
    np.testing.assert_allclose(masked[0].data, plain[0].data)
    assert not np.allclose(masked[2].data, plain[2].data)


def test_stack_wiring_and_state_detach(rng):
    layers = [
        SparseLstmLayer(plan_recurrent_layer(4, 6, 2, 0.5), rng, name="rnn.0"),
        SparseLstmLayer(plan_recurrent_layer(6, 4, 1, 1.0), rng, name="rnn.1"),
    ]
    model = stack(layers)
    xs = [Tensor(rng.normal(size=(2, 4))) for _ in range(3)]
    outputs, states = model.forward(xs)
    assert outputs[-1].shape == (2, 4)
    assert [len(s) for s in states] == [2, 1]
    lower, _ = sparse_lstm_forward(layers[0], xs)
    upper, _ = sparse_lstm_forward(layers[1], lower)
    np.testing.assert_allclose(outputs[-1].data, upper[-1].data)

    detached = detach_state(states)
    assert all(not h.requires_grad and h._backward is None for layer in detached for h, _ in layer)

    with pytest.raises(ShapeMismatchError):
        stack([layers[0], layers[0]])


def test_bilstm_backward_direction_reads_reversed_sequence(rng):
    plan = plan_recurrent_layer(3, 2, 1, 1.0)
    fwd = SparseLstmLayer(plan, rng)
    bwd = SparseLstmLayer(plan, rng)
    model = bilstm(fwd, bwd)
    xs = [Tensor(rng.normal(size=(1, 3))) for _ in range(4)]
    outputs = model.forward(xs)
    assert outputs[0].shape == (1, 4)
    rev, _ = sparse_lstm_forward(bwd, list(reversed(xs)))
    np.testing.assert_allclose(outputs[0].data[:, 2:], rev[-1].data)
    np.testing.assert_allclose(outputs[-1].data[:, 2:], rev[0].data)

    # swapping directions on a reversed sequence swaps the halves
    swapped = bilstm(bwd, fwd).forward(list(reversed(xs)))
    np.testing.assert_allclose(swapped[0].data[:, :2], outputs[-1].data[:, 2:])


def test_zero_weights_give_zero_output(rng):
    spec = plan_recurrent_layer(5, 3).components[0]
    params = LstmComponentParams(spec, initialize=False)
    h0, c0 = zero_state(2, 3)
    h, c = lstm_step(Tensor(rng.normal(size=(2, 5))), h0, c0, params)
    np.testing.assert_array_equal(h.data, np.zeros((2, 3)))
    np.testing.assert_array_equal(c.data, np.zeros((2, 3)))


def test_closed_forget_gate_keeps_cell_empty():
    spec = plan_recurrent_layer(4, 3).components[0]
    params = LstmComponentParams(spec, initialize=False)
    params.b_ih.data[3:6] = -50.0  # forget gate rows
    h, c = zero_state(1, 3)
    for _ in range(5):
        h, c = lstm_step(Tensor(np.zeros((1, 4))), h, c, params)
        assert np.max(np.abs(c.data)) < 1e-12
    # a filled cell is wiped in one step
    _, c = lstm_step(Tensor(np.zeros((1, 4))), h, Tensor(np.ones((1, 3))), params)
    assert np.max(np.abs(c.data)) < 1e-12


@pytest.mark.parametrize("kind, lr", [("sgd", 0.1), ("adam", 0.01)])
def test_masked_dense_training_keeps_structural_zeros(kind, lr):
    gen = np.random.default_rng(11)
    plan = plan_recurrent_layer(6, 6, 3, 0.5)
    dense = pack_dense_params(SparseLstmLayer(plan, gen))
    masks = expand_plan_to_masks(plan)
    off_hh = np.tile(masks[0], (4, 1)) == 0
    off_hi = np.tile(masks[1], (4, 1)) == 0
    start_hh = dense.w_hh.data.copy()
    optimizer = Optimizer(dense.parameters(), lr=lr, kind=kind, clip_norm=5.0)

    for _ in range(100):
        xs = [Tensor(gen.normal(size=(2, 6))) for _ in range(4)]
        readout = Tensor(gen.normal(size=(2, 6)))
        weight_mask = (gen.random((24, 6)) > 0.3) / 0.7
        with Tape() as tape:
            outputs, _ = masked_dense_forward(plan, dense, masks, xs, weight_mask=weight_mask)
            loss = total(mul(outputs[-1], readout))
        optimizer.zero_grad()
        backward(tape, loss)
        optimizer.step()

    assert np.all(dense.w_hh.data[off_hh] == 0.0)
    assert np.all(dense.w_hi.data[off_hi] == 0.0)
    assert not np.allclose(dense.w_hh.data[~off_hh], start_hh[~off_hh])
