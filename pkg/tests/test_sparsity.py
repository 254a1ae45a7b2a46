import numpy as np
import pytest
from pydantic import ValidationError

from sparselm.errors import InfeasibleSparsityError
from sparselm.models.plan import ComponentSpec, RecurrentSparsityPlan
from sparselm.services.sparsity import (
    count_lstm_params,
    dense_lstm_params,
    dense_plan,
    describe_plan,
    expand_plan_to_masks,
    plan_matching_dense,
    plan_within_budget,
    plan_recurrent_layer,
    solve_gamma_for_budget,
    solve_gamma_for_equal_params,
    uniform_segments,
)


def test_uniform_segments_give_remainder_to_earliest():
    assert uniform_segments(1150, 4) == [288, 288, 287, 287]
    assert uniform_segments(10, 5) == [2] * 5


def test_plan_windows_slide_across_inputs():
    plan = plan_recurrent_layer(10, 6, num_segments=3, gamma=0.4)
    assert [c.input_width for c in plan.components] == [4, 4, 4]
    assert [c.input_offset for c in plan.components] == [0, 3, 6]
    assert plan.components[-1].input_stop == 10
    assert sum(c.output_width for c in plan.components) == 6


def test_dense_plan_is_single_component():
    plan = dense_plan(400, 1150)
    assert plan.is_dense
    assert count_lstm_params(plan) == dense_lstm_params(400, 1150) == 4 * (1150 * 400 + 1150**2 + 2 * 1150)


def test_gamma_budget_match():
    gamma = solve_gamma_for_equal_params(1150, 1150, 1725, 1725, 3)
    assert 0.554 <= gamma <= 0.556


def test_gamma_infeasible():
    with pytest.raises(InfeasibleSparsityError):
        solve_gamma_for_equal_params(100, 100, 1000, 1000, 1)
    with pytest.raises(InfeasibleSparsityError):
        solve_gamma_for_equal_params(1000, 1000, 100, 100, 2)


def test_gamma_for_a_raw_budget():
    assert solve_gamma_for_budget(dense_lstm_params(1150, 1150), 1725, 1725, 3) == pytest.approx(
        solve_gamma_for_equal_params(1150, 1150, 1725, 1725, 3)
    )
    # a 1725->400 layer with one component fits the dense 1150->400 budget plus 402,500 spare
    plan = plan_within_budget(dense_lstm_params(1150, 400) + 402_500, 1725, 400, 1)
    assert plan.components[0].input_width == 1402
    assert count_lstm_params(plan) == 2_886_400
    with pytest.raises(InfeasibleSparsityError, match="cannot reach"):
        plan_within_budget(dense_lstm_params(400, 1150), 400, 1725, 3)


def test_matched_7m_component_map():
    layers = [
        plan_matching_dense(200, 575, 200, 1150, 4),
        plan_matching_dense(575, 575, 1150, 1150, 5),
        plan_matching_dense(575, 200, 1150, 200, 2),
    ]
    assert [c.input_width for c in layers[0].components] == [99] * 4
    assert [c.output_width for c in layers[0].components] == [288, 288, 287, 287]
    assert [c.input_width for c in layers[1].components] == [344] * 5
    assert [c.output_width for c in layers[1].components] == [230] * 5
    assert [c.input_width for c in layers[2].components] == [675] * 2
    assert [c.output_width for c in layers[2].components] == [100, 100]
    expected = [1.79e6, 2.65e6, 0.62e6]
    for plan, target in zip(layers, expected):
        assert abs(count_lstm_params(plan) - target) / target < 0.005
    # budget slack per layer stays within 4 * (h + width rounding)
    for plan, (i_d, h_d) in zip(layers, [(200, 575), (575, 575), (575, 200)]):
        assert abs(count_lstm_params(plan) - dense_lstm_params(i_d, h_d)) <= 4 * plan.hidden_size


def test_masks_match_plan():
    plan = plan_recurrent_layer(6, 4, num_segments=2, gamma=0.5)
    mask_hh, mask_hi = expand_plan_to_masks(plan)
    np.testing.assert_array_equal(mask_hh, np.kron(np.eye(2), np.ones((2, 2))))
    np.testing.assert_array_equal(mask_hi[:2], [[1, 1, 1, 0, 0, 0]] * 2)
    np.testing.assert_array_equal(mask_hi[2:], [[0, 0, 0, 1, 1, 1]] * 2)
    assert int(4 * (mask_hh.sum() + mask_hi.sum()) + 8 * plan.hidden_size) == count_lstm_params(plan)


@pytest.mark.parametrize(
    "args",
    [
        dict(input_size=10, hidden_size=4, num_segments=5, gamma=0.5),
        dict(input_size=10, hidden_size=4, num_segments=2, gamma=0.0),
        dict(input_size=10, hidden_size=4, num_segments=2, gamma=1.5),
        dict(input_size=10, hidden_size=4, num_segments=2, gamma=0.01),
    ],
)
def test_infeasible_plans(args):
    with pytest.raises(InfeasibleSparsityError):
        plan_recurrent_layer(**args)


def test_plan_model_rejects_bad_layout():
    with pytest.raises(ValidationError):
        RecurrentSparsityPlan(
            input_size=4, hidden_size=3, components=[ComponentSpec(input_offset=2, input_width=3, output_width=3)]
        )


def test_describe_plan_lists_components():
    text = describe_plan(plan_matching_dense(575, 575, 1150, 1150, 5), layer=2)
    assert "R_2,5" in text
    assert "344->230" in text
