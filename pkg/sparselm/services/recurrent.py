import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from sparselm.errors import ShapeMismatchError
from sparselm.models.plan import ComponentSpec, RecurrentSparsityPlan
from sparselm.services.autodiff import (
    Tensor,
    add,
    concat,
    detach,
    linear,
    mul,
    sigmoid,
    slice_columns,
    tanh,
)
from sparselm.services.sparsity import expand_plan_to_masks

log = logging.getLogger("sparse_recurrent")

GATE_ORDER = ("i", "f", "g", "o")

State = Tuple[Tensor, Tensor]


class LstmComponentParams:
    """Gate-stacked (i, f, g, o) weights of one dense LSTM component."""

    def __init__(
        self,
        spec: ComponentSpec,
        rng: Optional[np.random.Generator] = None,
        initialize: bool = True,
        name: str = "lstm",
    ) -> None:
        self.spec = spec
        out, width = spec.output_width, spec.input_width
        bound = 1.0 / np.sqrt(out)
        rng = rng if rng is not None else np.random.default_rng(0)

        def draw(shape):
            if not initialize:
                return np.zeros(shape)
            return rng.uniform(-bound, bound, size=shape)

        self.w_hi = Tensor(draw((4 * out, width)), requires_grad=True, name=f"{name}.w_hi")
        self.w_hh = Tensor(draw((4 * out, out)), requires_grad=True, name=f"{name}.w_hh")
        self.b_ih = Tensor(draw((4 * out,)), requires_grad=True, name=f"{name}.b_ih")
        self.b_hh = Tensor(draw((4 * out,)), requires_grad=True, name=f"{name}.b_hh")

    @property
    def output_width(self) -> int:
        return self.spec.output_width

    def parameters(self) -> List[Tensor]:
        return [self.w_hi, self.w_hh, self.b_ih, self.b_hh]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class DenseLstmParams:
    """Full 4h x i / 4h x h matrices of a layer, rows gate-major."""

    def __init__(self, w_hi: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> None:
        self.w_hi, self.w_hh, self.b_ih, self.b_hh = w_hi, w_hh, b_ih, b_hh

    @property
    def output_width(self) -> int:
        return self.w_hh.shape[1]

    def parameters(self) -> List[Tensor]:
        return [self.w_hi, self.w_hh, self.b_ih, self.b_hh]


def lstm_step(
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    params,
    w_hh: Optional[Tensor] = None,
    w_hi: Optional[Tensor] = None,
) -> State:
    out = params.output_width
    if h_prev.shape != c_prev.shape or h_prev.shape[-1] != out:
        raise ShapeMismatchError(f"state shapes {h_prev.shape}/{c_prev.shape} do not match output width {out}")
    gates = add(
        linear(x, params.w_hi if w_hi is None else w_hi, params.b_ih),
        linear(h_prev, params.w_hh if w_hh is None else w_hh, params.b_hh),
    )
    i = sigmoid(slice_columns(gates, 0, out))
    f = sigmoid(slice_columns(gates, out, 2 * out))
    g = tanh(slice_columns(gates, 2 * out, 3 * out))
    o = sigmoid(slice_columns(gates, 3 * out, 4 * out))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def zero_state(batch: int, width: int) -> State:
    return Tensor(np.zeros((batch, width))), Tensor(np.zeros((batch, width)))


class SparseLstmLayer:
    """Sparse LSTM layer realized as parallel dense components, outputs concatenated in plan order."""

    def __init__(
        self,
        plan: RecurrentSparsityPlan,
        rng: Optional[np.random.Generator] = None,
        initialize: bool = True,
        name: str = "lstm",
    ) -> None:
        self.plan = plan
        self.name = name
        self.components = [
            LstmComponentParams(spec, rng, initialize, name=f"{name}.c{n}") for n, spec in enumerate(plan.components)
        ]

    @property
    def input_size(self) -> int:
        return self.plan.input_size

    @property
    def hidden_size(self) -> int:
        return self.plan.hidden_size

    def parameters(self) -> List[Tensor]:
        return [p for c in self.components for p in c.parameters()]

    def parameter_count(self) -> int:
        return sum(c.parameter_count() for c in self.components)

    def init_state(self, batch: int) -> List[State]:
        return [zero_state(batch, c.output_width) for c in self.components]

    def recurrent_shapes(self) -> List[Tuple[int, int]]:
        return [c.w_hh.shape for c in self.components]


def sparse_lstm_forward(
    layer: SparseLstmLayer,
    inputs: Sequence[Tensor],
    init_state: Optional[List[State]] = None,
    weight_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> Tuple[List[Tensor], List[State]]:
    """Run every component over its input window; returns per-step outputs and final states."""
    if not inputs:
        raise ShapeMismatchError("empty input sequence")
    batch = inputs[0].shape[0]
    for x in inputs:
        if x.shape != (batch, layer.input_size):
            raise ShapeMismatchError(f"input shape {x.shape} != ({batch}, {layer.input_size})")
    states = init_state if init_state is not None else layer.init_state(batch)
    if len(states) != len(layer.components):
        raise ShapeMismatchError(f"{len(states)} states for {len(layer.components)} components")

    per_component: List[List[Tensor]] = []
    final: List[State] = []
    for n, (comp, (h, c)) in enumerate(zip(layer.components, states)):
        spec = comp.spec
        w_hh = comp.w_hh
        if weight_masks is not None and weight_masks[n] is not None:
            w_hh = mul(comp.w_hh, Tensor(weight_masks[n]))
        full_window = spec.input_offset == 0 and spec.input_width == layer.input_size
        outputs = []
        for x in inputs:
            x_n = x if full_window else slice_columns(x, spec.input_offset, spec.input_stop)
            h, c = lstm_step(x_n, h, c, comp, w_hh=w_hh)
            outputs.append(h)
        per_component.append(outputs)
        final.append((h, c))

    merged = [concat([outs[t] for outs in per_component], axis=-1) for t in range(len(inputs))]
    return merged, final


def pack_component_arrays(plan: RecurrentSparsityPlan, arrays: Sequence[np.ndarray], kind: str) -> np.ndarray:
    """Embed per-component arrays of ``kind`` (w_hi, w_hh, b_ih, b_hh) into the dense gate-major layout."""
    h, i = plan.hidden_size, plan.input_size
    if kind == "w_hi":
        dense = np.zeros((4 * h, i))
    elif kind == "w_hh":
        dense = np.zeros((4 * h, h))
    elif kind in ("b_ih", "b_hh"):
        dense = np.zeros(4 * h)
    else:
        raise ValueError(f"Unknown parameter kind: {kind}")
    for row0, spec, arr in zip(plan.output_offsets, plan.components, arrays):
        out = spec.output_width
        for q in range(4):
            rows = slice(q * h + row0, q * h + row0 + out)
            src = arr[q * out:(q + 1) * out]
            if kind == "w_hi":
                dense[rows, spec.input_offset:spec.input_stop] = src
            elif kind == "w_hh":
                dense[rows, row0:row0 + out] = src
            else:
                dense[rows] = src
    return dense


def pack_dense_params(layer: SparseLstmLayer) -> DenseLstmParams:
    def packed(kind):
        arrays = [getattr(c, kind).data for c in layer.components]
        return Tensor(pack_component_arrays(layer.plan, arrays, kind), requires_grad=True, name=f"{layer.name}.dense.{kind}")

    return DenseLstmParams(packed("w_hi"), packed("w_hh"), packed("b_ih"), packed("b_hh"))


def masked_dense_forward(
    plan: RecurrentSparsityPlan,
    params: DenseLstmParams,
    masks: Tuple[np.ndarray, np.ndarray],
    inputs: Sequence[Tensor],
    init_state: Optional[State] = None,
    weight_mask: Optional[np.ndarray] = None,
) -> Tuple[List[Tensor], State]:
    """One dense LSTM with W_hh * mask_hh and W_hi * mask_hi, masks repeated over the 4 gates."""
    mask_hh, mask_hi = masks
    expected_hh, expected_hi = expand_plan_to_masks(plan)
    if mask_hh.shape != expected_hh.shape or mask_hi.shape != expected_hi.shape:
        raise ShapeMismatchError(f"mask shapes {mask_hh.shape}/{mask_hi.shape} do not fit the plan")
    if not (np.array_equal(mask_hh, expected_hh) and np.array_equal(mask_hi, expected_hi)):
        raise ShapeMismatchError("masks are inconsistent with the plan layout")
    h = plan.hidden_size
    if params.w_hh.shape != (4 * h, h) or params.w_hi.shape != (4 * h, plan.input_size):
        raise ShapeMismatchError(f"dense params {params.w_hi.shape}/{params.w_hh.shape} do not fit the plan")

    hh = np.tile(mask_hh, (4, 1))
    if weight_mask is not None:
        hh = hh * weight_mask
    w_hh = mul(params.w_hh, Tensor(hh))
    w_hi = mul(params.w_hi, Tensor(np.tile(mask_hi, (4, 1))))

    batch = inputs[0].shape[0]
    h_t, c_t = init_state if init_state is not None else zero_state(batch, h)
    outputs = []
    for x in inputs:
        h_t, c_t = lstm_step(x, h_t, c_t, params, w_hh=w_hh, w_hi=w_hi)
        outputs.append(h_t)
    return outputs, (h_t, c_t)


def detach_state(states: List[List[State]]) -> List[List[State]]:
    return [[(detach(h), detach(c)) for h, c in layer] for layer in states]


class StackedLstm:
    """Layer n+1 consumes layer n's full concatenated output."""

    def __init__(self, layers: Sequence[SparseLstmLayer]) -> None:
        if not layers:
            raise ShapeMismatchError("a stack needs at least one layer")
        for n, (lower, upper) in enumerate(zip(layers[:-1], layers[1:])):
            if lower.hidden_size != upper.input_size:
                raise ShapeMismatchError(
                    f"layer {n} outputs {lower.hidden_size} but layer {n + 1} expects {upper.input_size}"
                )
        self.layers = list(layers)

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def output_size(self) -> int:
        return self.layers[-1].hidden_size

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def init_state(self, batch: int) -> List[List[State]]:
        return [layer.init_state(batch) for layer in self.layers]

    def forward(
        self,
        inputs: Sequence[Tensor],
        states: Optional[List[List[State]]] = None,
        hidden_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
        weight_masks: Optional[Sequence[Optional[Sequence[Optional[np.ndarray]]]]] = None,
    ) -> Tuple[List[Tensor], List[List[State]]]:
        """``hidden_masks[n]`` scales layer n's outputs before layer n+1 (between-layer dropout)."""
        states = states if states is not None else self.init_state(inputs[0].shape[0])
        new_states = []
        sequence = list(inputs)
        for n, layer in enumerate(self.layers):
            masks = weight_masks[n] if weight_masks is not None else None
            sequence, final = sparse_lstm_forward(layer, sequence, states[n], masks)
            new_states.append(final)
            if hidden_masks is not None and n < len(self.layers) - 1 and hidden_masks[n] is not None:
                keep = Tensor(hidden_masks[n])
                sequence = [mul(h, keep) for h in sequence]
        return sequence, new_states


def stack(layers: Sequence[SparseLstmLayer]) -> StackedLstm:
    return StackedLstm(layers)


class BiLstm:
    """Forward and backward layers over the same sequence, outputs concatenated (2h)."""

    def __init__(self, forward_layer: SparseLstmLayer, backward_layer: SparseLstmLayer) -> None:
        if forward_layer.input_size != backward_layer.input_size:
            raise ShapeMismatchError(
                f"directions read different widths: {forward_layer.input_size} vs {backward_layer.input_size}"
            )
        self.forward_layer = forward_layer
        self.backward_layer = backward_layer

    @property
    def output_size(self) -> int:
        return self.forward_layer.hidden_size + self.backward_layer.hidden_size

    def parameters(self) -> List[Tensor]:
        return self.forward_layer.parameters() + self.backward_layer.parameters()

    def directions(self, inputs: Sequence[Tensor], weight_masks=None) -> Tuple[List[Tensor], List[Tensor]]:
        fwd_masks = weight_masks[0] if weight_masks is not None else None
        bwd_masks = weight_masks[1] if weight_masks is not None else None
        fwd, _ = sparse_lstm_forward(self.forward_layer, inputs, None, fwd_masks)
        bwd_rev, _ = sparse_lstm_forward(self.backward_layer, list(reversed(inputs)), None, bwd_masks)
        return fwd, list(reversed(bwd_rev))

    def forward(self, inputs: Sequence[Tensor], weight_masks=None) -> List[Tensor]:
        fwd, bwd = self.directions(inputs, weight_masks)
        return [concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]


def bilstm(forward_layer: SparseLstmLayer, backward_layer: SparseLstmLayer) -> BiLstm:
    return BiLstm(forward_layer, backward_layer)
