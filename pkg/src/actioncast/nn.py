"""Minimal dense numerical kernel: activations, stacked LSTMs with exact
backpropagation through time, inverted dropout, and the Adam optimizer.

Everything runs in float64; gradient checking against central finite
differences at 1e-4 relative tolerance is not reliable in float32. All
gradients here are hand-derived and verified by the test suite's
finite-difference oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def sigmoid(x: Array | float) -> Array:
    """Elementwise logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    pos = np.where(x >= 0, x, 0.0)
    neg = np.where(x < 0, x, 0.0)
    exp_neg = np.exp(neg)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-pos)), exp_neg / (1.0 + exp_neg))


def softmax(v: Array, axis: int = -1) -> Array:
    """Probability vector from raw scores; shift-invariant by construction."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# LSTM layer
# ---------------------------------------------------------------------------

def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LstmLayerParams:
    """One LSTM layer with fused gate weights.

    Gate blocks along the first axis, in order: input, forget, output,
    candidate. ``w_x`` is (4H, D_in), ``w_h`` is (4H, H), ``b`` is (4H,).
    """

    w_x: Array
    w_h: Array
    b: Array

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[1]

    @classmethod
    def initialize(
        cls,
        input_dim: int,
        hidden_size: int,
        rng: np.random.Generator,
        forget_bias: float = 1.0,
    ) -> "LstmLayerParams":
        w_x = uniform_fan_in(rng, (4 * hidden_size, input_dim), input_dim)
        w_h = uniform_fan_in(rng, (4 * hidden_size, hidden_size), hidden_size)
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = forget_bias
        return cls(w_x, w_h, b)


@dataclass
class LstmLayerGrads:
    w_x: Array
    w_h: Array
    b: Array


def _split_gates(pre: Array, hidden: int) -> tuple[Array, Array, Array, Array]:
    i = sigmoid(pre[..., :hidden])
    f = sigmoid(pre[..., hidden:2 * hidden])
    o = sigmoid(pre[..., 2 * hidden:3 * hidden])
    g = np.tanh(pre[..., 3 * hidden:])
    return i, f, o, g


def lstm_cell_step(
    layer: LstmLayerParams,
    x: Array,
    h_prev: Array,
    c_prev: Array,
) -> tuple[Array, Array]:
    """One LSTM step: gates from affine maps, c = f*c_prev + i*g, h = o*tanh(c).

    Accepts single vectors or batched (B, dim) rows.
    """
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x.shape[-1] != layer.input_dim:
        raise ValueError(
            f"input dim {x.shape[-1]} does not match layer input dim {layer.input_dim}"
        )
    if h_prev.shape[-1] != layer.hidden_size or c_prev.shape[-1] != layer.hidden_size:
        raise ValueError("state dims do not match layer hidden size")
    pre = x @ layer.w_x.T + h_prev @ layer.w_h.T + layer.b
    i, f, o, g = _split_gates(pre, layer.hidden_size)
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


@dataclass
class _LayerCache:
    inputs: Array      # (T, B, D_in) as consumed by this layer
    gate_i: Array      # (T, B, H)
    gate_f: Array
    gate_o: Array
    cand: Array
    cell: Array
    tanh_cell: Array
    h_prev: Array      # hidden state entering each step
    c_prev: Array


def _lstm_layer_forward(layer: LstmLayerParams, inputs: Array) -> tuple[Array, _LayerCache]:
    """Run one layer over a (T, B, D_in) sequence from zero initial state."""
    steps, batch, _ = inputs.shape
    hidden = layer.hidden_size
    shape = (steps, batch, hidden)
    cache = _LayerCache(
        inputs=inputs,
        gate_i=np.empty(shape), gate_f=np.empty(shape),
        gate_o=np.empty(shape), cand=np.empty(shape),
        cell=np.empty(shape), tanh_cell=np.empty(shape),
        h_prev=np.empty(shape), c_prev=np.empty(shape),
    )
    hs = np.empty(shape)
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    for t in range(steps):
        cache.h_prev[t] = h
        cache.c_prev[t] = c
        pre = inputs[t] @ layer.w_x.T + h @ layer.w_h.T + layer.b
        i, f, o, g = _split_gates(pre, hidden)
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.gate_i[t] = i
        cache.gate_f[t] = f
        cache.gate_o[t] = o
        cache.cand[t] = g
        cache.cell[t] = c
        cache.tanh_cell[t] = tc
        hs[t] = h
    return hs, cache


def _lstm_layer_backward(
    layer: LstmLayerParams,
    cache: _LayerCache,
    d_hs: Array,
) -> tuple[LstmLayerGrads, Array]:
    """Backprop through one layer given upstream gradients on every step's h.

    Returns parameter gradients and the gradient w.r.t. the layer inputs.
    """
    steps, batch, hidden = d_hs.shape
    d_w_x = np.zeros_like(layer.w_x)
    d_w_h = np.zeros_like(layer.w_h)
    d_b = np.zeros_like(layer.b)
    d_inputs = np.empty_like(cache.inputs)
    d_h = np.zeros((batch, hidden))
    d_c = np.zeros((batch, hidden))
    for t in reversed(range(steps)):
        dh_total = d_hs[t] + d_h
        i, f, o, g = cache.gate_i[t], cache.gate_f[t], cache.gate_o[t], cache.cand[t]
        tc = cache.tanh_cell[t]
        d_o = dh_total * tc
        d_c = d_c + dh_total * o * (1.0 - tc * tc)
        d_i = d_c * g
        d_g = d_c * i
        d_f = d_c * cache.c_prev[t]
        d_c = d_c * f  # carries to step t-1
        d_pre = np.concatenate(
            [
                d_i * i * (1.0 - i),
                d_f * f * (1.0 - f),
                d_o * o * (1.0 - o),
                d_g * (1.0 - g * g),
            ],
            axis=-1,
        )
        d_w_x += d_pre.T @ cache.inputs[t]
        d_w_h += d_pre.T @ cache.h_prev[t]
        d_b += d_pre.sum(axis=0)
        d_inputs[t] = d_pre @ layer.w_x
        d_h = d_pre @ layer.w_h
    return LstmLayerGrads(d_w_x, d_w_h, d_b), d_inputs


# ---------------------------------------------------------------------------
# Stacked LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmStackCache:
    layer_caches: list[_LayerCache]
    dropout_masks: list[Array | None]
    single: bool  # input was a single unbatched clip


def lstm_stack_forward(
    layers: list[LstmLayerParams],
    inputs: Array,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Array, LstmStackCache]:
    """Run a stack of LSTM layers over a clip and return the top layer's
    final hidden state plus cached activations for backprop.

    ``inputs`` is (T, D) for a single clip or (T, B, D) for a batch. Hidden
    and cell states start at zero. Inverted dropout is applied to each
    non-top layer's output sequence in train mode only, so evaluation is an
    exact identity.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    single = inputs.ndim == 2
    if single:
        inputs = inputs[:, None, :]
    if inputs.ndim != 3:
        raise ValueError("inputs must be (T, D) or (T, B, D)")
    if inputs.shape[0] < 1:
        raise ValueError("clip must contain at least one frame")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must be in [0, 1)")
    if inputs.shape[-1] != layers[0].input_dim:
        raise ValueError(
            f"clip feature dim {inputs.shape[-1]} does not match "
            f"first layer input dim {layers[0].input_dim}"
        )

    x = inputs
    caches: list[_LayerCache] = []
    masks: list[Array | None] = []
    for li, layer in enumerate(layers):
        hs, cache = _lstm_layer_forward(layer, x)
        caches.append(cache)
        apply_dropout = li < len(layers) - 1 and train and dropout_rate > 0.0
        if apply_dropout:
            if rng is None:
                raise ValueError("dropout in train mode requires an rng")
            keep = 1.0 - dropout_rate
            mask = (rng.random(hs.shape) < keep).astype(np.float64) / keep
            hs = hs * mask
            masks.append(mask)
        else:
            masks.append(None)
        x = hs
    h_final = x[-1]
    if single:
        h_final = h_final[0]
    return h_final, LstmStackCache(caches, masks, single)


def lstm_stack_backward(
    layers: list[LstmLayerParams],
    cache: LstmStackCache,
    d_h_final: Array,
) -> tuple[list[LstmLayerGrads], Array]:
    """BPTT through the stack given the gradient on the final hidden state."""
    d_h_final = np.asarray(d_h_final, dtype=np.float64)
    if cache.single:
        d_h_final = d_h_final[None, :]
    top = cache.layer_caches[-1]
    steps, batch, hidden = top.gate_i.shape
    d_hs = np.zeros((steps, batch, hidden))
    d_hs[-1] = d_h_final

    grads: list[LstmLayerGrads] = [None] * len(layers)  # type: ignore[list-item]
    for li in reversed(range(len(layers))):
        if cache.dropout_masks[li] is not None:
            d_hs = d_hs * cache.dropout_masks[li]
        layer_grads, d_inputs = _lstm_layer_backward(layers[li], cache.layer_caches[li], d_hs)
        grads[li] = layer_grads
        d_hs = d_inputs  # becomes the per-step h-gradient of the layer below
    d_clip = d_hs
    if cache.single:
        d_clip = d_clip[:, 0, :]
    return grads, d_clip


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    """Per-tensor first/second moment estimates plus the shared step count."""

    config: AdamConfig
    step_count: int
    first_moment: dict[str, Array]
    second_moment: dict[str, Array]

    @classmethod
    def initial(cls, params: dict[str, Array], config: AdamConfig | None = None) -> "AdamState":
        config = config or AdamConfig()
        return cls(
            config=config,
            step_count=0,
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: AdamState,
) -> tuple[dict[str, Array], AdamState]:
    """One bias-corrected Adam update. Returns new params and state."""
    cfg = state.config
    t = state.step_count + 1
    new_params: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    bias1 = 1.0 - cfg.beta1 ** t
    bias2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = cfg.beta1 * state.first_moment[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.second_moment[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(cfg, t, new_m, new_v)


def global_norm(grads: dict[str, Array]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_by_global_norm(
    grads: dict[str, Array],
    max_norm: float | None,
) -> tuple[dict[str, Array], float]:
    """Scale all gradients so their global L2 norm does not exceed max_norm."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
