import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from sparselm.errors import InfeasibleSparsityError
from sparselm.models.plan import ComponentSpec, RecurrentSparsityPlan

log = logging.getLogger("sparsity_plan")

GATES = 4


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def uniform_segments(total: int, count: int) -> List[int]:
    """Split ``total`` into ``count`` lengths; the earliest get the remainder."""
    base, extra = divmod(total, count)
    return [base + 1 if n < extra else base for n in range(count)]


def plan_recurrent_layer(
    input_size: int,
    hidden_size: int,
    num_segments: int = 1,
    gamma: float = 1.0,
    segment_lengths: Optional[Sequence[int]] = None,
) -> RecurrentSparsityPlan:
    """Block-diagonal W_hh with one input window of width round(gamma * i) per segment.

    Windows move from the first to the last input dimension, one discrete
    step per segment.
    """
    if num_segments < 1 or num_segments > hidden_size:
        raise InfeasibleSparsityError(f"need 1 <= N <= h, got N={num_segments}, h={hidden_size}")
    if not 0.0 < gamma <= 1.0:
        raise InfeasibleSparsityError(f"gamma must lie in (0, 1], got {gamma}")
    width = round_half_up(gamma * input_size)
    if width < 1:
        raise InfeasibleSparsityError(f"gamma={gamma} leaves an empty window for input size {input_size}")
    width = min(width, input_size)

    if segment_lengths is None:
        lengths = uniform_segments(hidden_size, num_segments)
    else:
        lengths = [int(s) for s in segment_lengths]
        if len(lengths) != num_segments:
            raise InfeasibleSparsityError(f"{len(lengths)} segment lengths given for N={num_segments}")
        if sum(lengths) != hidden_size or min(lengths) < 1:
            raise InfeasibleSparsityError(f"segment lengths {lengths} must be positive and sum to h={hidden_size}")

    components = []
    for n, out in enumerate(lengths):
        offset = 0 if num_segments == 1 else round_half_up(n * (input_size - width) / (num_segments - 1))
        components.append(ComponentSpec(input_offset=offset, input_width=width, output_width=out))
    return RecurrentSparsityPlan(input_size=input_size, hidden_size=hidden_size, components=components)


def dense_plan(input_size: int, hidden_size: int) -> RecurrentSparsityPlan:
    return plan_recurrent_layer(input_size, hidden_size, 1, 1.0)


def component_param_count(spec: ComponentSpec) -> int:
    out = spec.output_width
    return GATES * (out * spec.input_width + out * out + 2 * out)


def count_lstm_params(plan: RecurrentSparsityPlan) -> int:
    return sum(component_param_count(c) for c in plan.components)


def dense_lstm_params(input_size: int, hidden_size: int) -> int:
    return GATES * (hidden_size * input_size + hidden_size * hidden_size + 2 * hidden_size)


def solve_gamma_for_budget(budget: float, sparse_input: int, sparse_hidden: int, num_segments: int,
                           reference: str = "") -> float:
    """Window fraction giving N parallel components a total of ``budget`` parameters."""
    per_gate = budget / GATES - sparse_hidden**2 / num_segments - 2 * sparse_hidden
    gamma = per_gate / (sparse_hidden * sparse_input)
    target = reference or f"{int(round(budget))}-parameter"
    if gamma <= 0.0:
        raise InfeasibleSparsityError(
            f"sparse layer {sparse_input}->{sparse_hidden} with N={num_segments} exceeds the "
            f"{target} budget even with empty windows (gamma={gamma:.4f})"
        )
    if gamma > 1.0 + 1e-12:
        raise InfeasibleSparsityError(
            f"sparse layer {sparse_input}->{sparse_hidden} with N={num_segments} cannot reach the "
            f"{target} budget (gamma={gamma:.4f} > 1)"
        )
    return min(gamma, 1.0)


def solve_gamma_for_equal_params(
    dense_input: int, dense_hidden: int, sparse_input: int, sparse_hidden: int, num_segments: int
) -> float:
    """Window fraction giving N parallel components the dense layer's parameter count."""
    return solve_gamma_for_budget(
        dense_lstm_params(dense_input, dense_hidden), sparse_input, sparse_hidden, num_segments,
        reference=f"{dense_input}->{dense_hidden}",
    )


def plan_matching_dense(
    dense_input: int, dense_hidden: int, sparse_input: int, sparse_hidden: int, num_segments: int
) -> RecurrentSparsityPlan:
    gamma = solve_gamma_for_equal_params(dense_input, dense_hidden, sparse_input, sparse_hidden, num_segments)
    plan = plan_recurrent_layer(sparse_input, sparse_hidden, num_segments, gamma)
    log.debug(
        f"matched {dense_input}->{dense_hidden} dense ({dense_lstm_params(dense_input, dense_hidden)} params) "
        f"with N={num_segments} gamma={gamma:.4f}: {count_lstm_params(plan)} params"
    )
    return plan


def plan_within_budget(budget: int, sparse_input: int, sparse_hidden: int, num_segments: int) -> RecurrentSparsityPlan:
    gamma = solve_gamma_for_budget(budget, sparse_input, sparse_hidden, num_segments)
    plan = plan_recurrent_layer(sparse_input, sparse_hidden, num_segments, gamma)
    log.debug(f"fitted {budget} params with N={num_segments} gamma={gamma:.4f}: {count_lstm_params(plan)} params")
    return plan


def expand_plan_to_masks(plan: RecurrentSparsityPlan) -> Tuple[np.ndarray, np.ndarray]:
    """0/1 masks (h x h, h x i) of the trainable entries of one gate's W_hh and W_hi."""
    h, i = plan.hidden_size, plan.input_size
    mask_hh = np.zeros((h, h))
    mask_hi = np.zeros((h, i))
    for row0, c in zip(plan.output_offsets, plan.components):
        rows = slice(row0, row0 + c.output_width)
        mask_hh[rows, rows] = 1.0
        mask_hi[rows, c.input_offset:c.input_stop] = 1.0
    return mask_hh, mask_hi


def describe_plan(plan: RecurrentSparsityPlan, layer: Optional[int] = None) -> str:
    prefix = f"R_{layer}," if layer is not None else "R_"
    lines = [f"layer {plan.input_size}->{plan.hidden_size}, N={plan.num_segments}"]
    for n, c in enumerate(plan.components, start=1):
        lines.append(
            f"  {prefix}{n}: inputs [{c.input_offset}, {c.input_stop}) "
            f"{c.input_width}->{c.output_width}  {component_param_count(c):,} par."
        )
    lines.append(f"  total: {count_lstm_params(plan):,} par.")
    return "\n".join(lines)
