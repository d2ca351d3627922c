"""GPT-style decoder-only transformer with one carry-aware attention layer.

Pre-norm blocks, learned absolute position embeddings, causal self-attention,
tied input/output embeddings. Block ``insertion_layer`` (1-based) accepts an
optional carry vector that joins attention as one extra key/value slot
visible to every query position; the carry is never a query, so the layer
still produces exactly T outputs.

Parameters live in a flat ``{name: Tensor}`` dict:
    wte, wpe, ln_f.{g,b},
    h.<i>.ln_1.{g,b}, h.<i>.attn.{w_qkv,b_qkv,w_proj,b_proj},
    h.<i>.ln_2.{g,b}, h.<i>.mlp.{w_fc,b_fc,w_proj,b_proj}
plus the recurrence module's ``recurrence.*`` entries (see recurrence.py).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .core.rng import Rng
from .core.tensor import (
    Tensor,
    add,
    concat_cols,
    embedding,
    gelu,
    layer_norm,
    matmul,
    no_tape,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)
from .errors import ConfigError, ContextSizeError, DimensionError, InputError, VocabularyError

logger = logging.getLogger(__name__)

Params = dict[str, Tensor]
CarryLike = Union[Tensor, np.ndarray, None]

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    layers (L), hidden (k), heads, max_positions (T_max), vocab_size (V),
    insertion_layer (l_ins, 1-based), ffn_mult (block MLP width = ffn_mult·k),
    carry_hidden / carry_depth (carry FFN shape), layernorm_eps.

    pooling selects the window summary: "mean" over positions or the printed
    "sum". mask_carry is a debug switch that removes the carry slot from the
    attention softmax while still computing its keys and values.
    """

    layers: int
    hidden: int
    heads: int
    max_positions: int
    vocab_size: int
    insertion_layer: int = 2
    ffn_mult: int = 4
    carry_hidden: int = 200
    carry_depth: int = 3
    layernorm_eps: float = 1e-5
    gelu_approximate: bool = False
    pooling: str = "mean"
    mask_carry: bool = False

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ConfigError("Invalid model config: " + "; ".join(errors), errors)

    def validate(self) -> list[str]:
        errors = []
        if self.layers < 1:
            errors.append("model.layers: must be >= 1")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            errors.append(f"model.hidden: {self.hidden} must be divisible by heads={self.heads}")
        if self.max_positions < 2:
            errors.append("model.max_positions: must be >= 2")
        if self.vocab_size < 1:
            errors.append("model.vocab_size: must be >= 1")
        if not 1 <= self.insertion_layer <= max(self.layers, 1):
            errors.append(
                f"model.insertion_layer: {self.insertion_layer} outside 1..{self.layers}"
            )
        if self.ffn_mult < 1:
            errors.append("model.ffn_mult: must be >= 1")
        if self.carry_depth < 0 or self.carry_hidden < 1:
            errors.append("model.carry_depth/carry_hidden: depth >= 0, width >= 1")
        if self.layernorm_eps <= 0:
            errors.append("model.layernorm_eps: must be > 0")
        if self.pooling not in ("mean", "sum"):
            errors.append(f"model.pooling: {self.pooling!r} is not 'mean' or 'sum'")
        return errors

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_width(self) -> int:
        return self.ffn_mult * self.hidden

    @classmethod
    def gpt2_small(cls, **overrides) -> "ModelConfig":
        """GPT-2-small shape with the 3×200 carry network inserted at layer 2."""
        base = dict(
            layers=12,
            hidden=768,
            heads=12,
            max_positions=1024,
            vocab_size=50257,
            insertion_layer=2,
            ffn_mult=4,
            carry_hidden=200,
            carry_depth=3,
        )
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def transformer_shapes(self) -> dict[str, tuple[int, ...]]:
        k, m = self.hidden, self.mlp_width
        shapes: dict[str, tuple[int, ...]] = {
            "wte": (self.vocab_size, k),
            "wpe": (self.max_positions, k),
        }
        for i in range(1, self.layers + 1):
            p = f"h.{i}."
            shapes.update(
                {
                    p + "ln_1.g": (k,),
                    p + "ln_1.b": (k,),
                    p + "attn.w_qkv": (k, 3 * k),
                    p + "attn.b_qkv": (3 * k,),
                    p + "attn.w_proj": (k, k),
                    p + "attn.b_proj": (k,),
                    p + "ln_2.g": (k,),
                    p + "ln_2.b": (k,),
                    p + "mlp.w_fc": (k, m),
                    p + "mlp.b_fc": (m,),
                    p + "mlp.w_proj": (m, k),
                    p + "mlp.b_proj": (k,),
                }
            )
        shapes["ln_f.g"] = (k,)
        shapes["ln_f.b"] = (k,)
        return shapes

    def recurrence_shapes(self) -> dict[str, tuple[int, ...]]:
        from .recurrence import recurrence_shapes

        return recurrence_shapes(self)

    def parameter_shapes(self, recurrent: bool = True) -> dict[str, tuple[int, ...]]:
        shapes = self.transformer_shapes()
        if recurrent:
            shapes.update(self.recurrence_shapes())
        return shapes

    def count_parameters(self, recurrent: bool = True) -> int:
        return sum(int(np.prod(s)) for s in self.parameter_shapes(recurrent).values())


@dataclass
class WindowActivations:
    """Per-layer block outputs (L arrays of T×k) and T×V logits for one window."""

    hiddens: list[Tensor]
    logits: Tensor

    @property
    def length(self) -> int:
        return self.logits.shape[0]


def init_transformer_params(config: ModelConfig, rng: Rng) -> Params:
    """GPT-2 style init: N(0, 0.02) weights, residual projections scaled by 1/sqrt(2L)."""
    gen = rng.stream("init.transformer")
    resid_std = INIT_STD / math.sqrt(2 * config.layers)
    params: Params = {}
    for name, shape in config.transformer_shapes().items():
        if name.endswith(".g"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        elif name.endswith("w_proj"):
            value = gen.normal(0.0, resid_std, size=shape)
        else:
            value = gen.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(value, name=name)
    return params


def init_params(config: ModelConfig, rng: Rng, recurrent: bool = True) -> Params:
    """Fresh transformer parameters, plus the recurrence module when ``recurrent``."""
    params = init_transformer_params(config, rng)
    if recurrent:
        from .recurrence import init_recurrence_params

        params.update(init_recurrence_params(config, rng))
    logger.debug(f"Initialized {len(params)} parameter arrays (recurrent={recurrent})")
    return params


def _as_carry(carry: CarryLike, k: int) -> Optional[Tensor]:
    if carry is None:
        return None
    tensor = carry if isinstance(carry, Tensor) else Tensor(carry)
    if tensor.size != k:
        raise DimensionError(f"carry must hold {k} values, got shape {tensor.shape}")
    return tensor if tensor.shape == (1, k) else reshape(tensor, (1, k))


def attention_with_extra_kv(
    x: Tensor,
    carry: Optional[Tensor],
    config: ModelConfig,
    params: Params,
    layer: int,
) -> Tensor:
    """Causal multi-head self-attention with an optional extra key/value slot.

    Args:
        x: T×k layer-normalized inputs (queries, keys and values)
        carry: 1×k layer-normalized carry, or None
        config: Model config (heads, mask_carry)
        params: Parameter dict
        layer: 1-based block index

    Returns:
        T×k attention output (after the output projection)
    """
    T, k = x.shape
    if k != config.hidden:
        raise DimensionError(f"attention input {x.shape} does not match hidden size {k}")
    p = f"h.{layer}.attn."
    w_qkv, b_qkv = params[p + "w_qkv"], params[p + "b_qkv"]
    d = config.head_dim
    inv_sqrt_d = 1.0 / math.sqrt(d)

    qkv = add(matmul(x, w_qkv), b_qkv)
    q = slice_cols(qkv, 0, k)
    keys = slice_cols(qkv, k, 2 * k)
    values = slice_cols(qkv, 2 * k, 3 * k)

    carry_kv = None
    if carry is not None:
        # Keys and values only: the carry never forms a query.
        carry_kv = add(matmul(carry, slice_cols(w_qkv, k, 3 * k)), slice_cols(b_qkv, k, 3 * k))
    use_carry = carry_kv is not None and not config.mask_carry

    causal = np.tril(np.ones((T, T), dtype=bool))
    carry_mask = np.concatenate([np.ones((T, 1), dtype=bool), causal], axis=1)

    heads = []
    for h in range(config.heads):
        lo, hi = h * d, (h + 1) * d
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(keys, lo, hi)
        vh = slice_cols(values, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d)
        if use_carry:
            ck = slice_cols(carry_kv, lo, hi)
            cv = slice_cols(carry_kv, k + lo, k + hi)
            carry_scores = scale(matmul(qh, transpose(ck)), inv_sqrt_d)
            probs = softmax_rows(concat_cols([carry_scores, scores]), carry_mask)
            out = add(
                matmul(slice_cols(probs, 1, T + 1), vh),
                matmul(slice_cols(probs, 0, 1), cv),
            )
        else:
            probs = softmax_rows(scores, causal)
            out = matmul(probs, vh)
        heads.append(out)

    merged = heads[0] if len(heads) == 1 else concat_cols(heads)
    return add(matmul(merged, params[p + "w_proj"]), params[p + "b_proj"])


def _block(
    x: Tensor, layer: int, carry: Optional[Tensor], config: ModelConfig, params: Params
) -> Tensor:
    p = f"h.{layer}."
    eps = config.layernorm_eps
    g1, b1 = params[p + "ln_1.g"], params[p + "ln_1.b"]
    attn_in = layer_norm(x, g1, b1, eps)
    carry_in = layer_norm(carry, g1, b1, eps) if carry is not None else None
    x = add(x, attention_with_extra_kv(attn_in, carry_in, config, params, layer))

    mlp_in = layer_norm(x, params[p + "ln_2.g"], params[p + "ln_2.b"], eps)
    hidden = gelu(
        add(matmul(mlp_in, params[p + "mlp.w_fc"]), params[p + "mlp.b_fc"]),
        approximate=config.gelu_approximate,
    )
    return add(x, add(matmul(hidden, params[p + "mlp.w_proj"]), params[p + "mlp.b_proj"]))


def forward_window(
    tokens: Sequence[int],
    carry: CarryLike,
    config: ModelConfig,
    params: Params,
) -> WindowActivations:
    """Run one window of T tokens.

    The carry (length k) joins attention at ``config.insertion_layer`` only; it
    gets that layer's pre-attention layer norm and K/V projections but no
    position embedding. Without a carry this is a plain transformer forward.

    Raises:
        InputError: Empty window
        ContextSizeError: T > max_positions
        VocabularyError: Token id outside 0..V-1
    """
    ids = np.asarray(tokens, dtype=np.int64)
    T = int(ids.size)
    if T == 0:
        raise InputError("forward_window needs at least one token")
    if T > config.max_positions:
        raise ContextSizeError(f"window of {T} tokens exceeds max_positions={config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= config.vocab_size)][0])
        raise VocabularyError(f"token id {bad} outside vocabulary of size {config.vocab_size}")
    carry_t = _as_carry(carry, config.hidden)

    x = add(embedding(params["wte"], ids), slice_rows(params["wpe"], 0, T))
    hiddens = []
    for layer in range(1, config.layers + 1):
        layer_carry = carry_t if layer == config.insertion_layer else None
        x = _block(x, layer, layer_carry, config, params)
        hiddens.append(x)

    final = layer_norm(x, params["ln_f.g"], params["ln_f.b"], config.layernorm_eps)
    logits = matmul(final, transpose(params["wte"]))
    return WindowActivations(hiddens=hiddens, logits=logits)


def greedy_decode(
    prompt: Sequence[int],
    n_steps: int,
    config: ModelConfig,
    params: Params,
    *,
    window: Optional[int] = None,
    overlap: int = 0,
    recurrent: bool = True,
) -> list[int]:
    """Append ``n_steps`` argmax tokens to ``prompt``.

    Once the sequence outgrows the window, execution follows the same window
    schedule as evaluation: a new window starts every ``window - overlap``
    tokens and, when ``recurrent``, receives the carry pooled from the previous
    window's full input span. Ties go to the lowest token id.

    Raises:
        InputError: Empty prompt or n_steps < 1
    """
    from .recurrence import recurrence_step
    from .windowing import ExecutionMode, make_plan

    if len(prompt) == 0:
        raise InputError("greedy_decode needs a non-empty prompt")
    if n_steps < 1:
        raise InputError(f"n_steps must be >= 1, got {n_steps}")
    T = window or config.max_positions
    mode = ExecutionMode.RECURRENT if recurrent else ExecutionMode.BASELINE

    tokens = [int(t) for t in prompt]
    carries: dict[int, np.ndarray] = {}

    def carry_from(plan, index: int) -> np.ndarray:
        # Carry produced by window ``index`` over its full input span.
        if index not in carries:
            prev = carry_from(plan, index - 1) if index > 0 else None
            a, b = plan.windows[index].input_span
            acts = forward_window(tokens[a - 1 : b], prev, config, params)
            carries[index] = recurrence_step(acts, config, params, index + 1).h_prev.data
        return carries[index]

    generated = []
    with no_tape():
        for _ in range(n_steps):
            target = len(tokens) + 1
            plan = make_plan(target, T, overlap, mode)
            index = len(plan.windows) - 1
            a, _ = plan.windows[index].input_span
            carry = carry_from(plan, index - 1) if recurrent and index > 0 else None
            acts = forward_window(tokens[a - 1 : target - 1], carry, config, params)
            next_id = int(np.argmax(acts.logits.data[-1]))
            tokens.append(next_id)
            generated.append(next_id)
    return generated
