"""FLOPs accounting for windowed execution.

Counting convention:
    - a multiply-add is 2 FLOPs, so an (m×n)@(n×p) product costs 2·m·n·p
    - per element: layer norm 5, softmax 5, GELU 8
    - bias adds and residual adds cost 1 per element; the 1/sqrt(d) score
      scaling is not counted
    - the embedding lookup is free; adding position embeddings costs T·k
    - attention scores and value mixing run over the full T×T (+1 carry key)
      matrix, matching what the causal kernel actually multiplies
    - the unembedding (tied to the token embedding) costs 2·T·k·V

The ``*_matmul`` entries of ``FlopsModel.breakdown`` are exactly the FLOPs
``core.tensor.matmul`` executes for one ``forward_window`` call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .model import ModelConfig
from .recurrence import ffn_layer_shapes

logger = logging.getLogger(__name__)

LAYERNORM = 5
SOFTMAX = 5
GELU = 8

CSV_HEADER = ("T", "overlap", "mode", "flops_per_token")


def flops_matmul(m: int, n: int, p: int) -> int:
    return 2 * m * n * p


@dataclass(frozen=True)
class FlopsModel:
    config: ModelConfig

    def breakdown(self, T: int, extra_kv: bool = False) -> dict[str, int]:
        """Per-component FLOPs of one window forward."""
        if T < 1:
            raise ValueError(f"window length must be >= 1, got {T}")
        c = self.config
        k, m, V, L, H = c.hidden, c.mlp_width, c.vocab_size, c.layers, c.heads
        keys = T + 1 if extra_kv else T

        counts = {
            "embedding": T * k,
            "attn_proj_matmul": L * (flops_matmul(T, k, 3 * k) + flops_matmul(T, k, k)),
            "attn_score_matmul": L * 2 * flops_matmul(T, k, T),
            "mlp_matmul": L * (flops_matmul(T, k, m) + flops_matmul(T, m, k)),
            "unembed_matmul": flops_matmul(T, k, V),
            "layernorm": LAYERNORM * T * k * (2 * L + 1),
            "softmax": SOFTMAX * L * H * T * T,
            "gelu": GELU * L * T * m,
            "bias_residual": L * (3 * T * k + T * k + T * k + T * m + T * k + T * k),
            "carry_kv_matmul": 0,
            "carry_attn_matmul": 0,
            "carry_elementwise": 0,
        }
        if extra_kv:
            counts["carry_kv_matmul"] = flops_matmul(1, k, 2 * k)
            counts["carry_attn_matmul"] = 2 * flops_matmul(T, k, 1)
            counts["carry_elementwise"] = (
                LAYERNORM * k + 2 * k + SOFTMAX * H * T * (keys - T)
            )
        return counts

    def matmul_flops(self, T: int, extra_kv: bool = False) -> int:
        return sum(v for name, v in self.breakdown(T, extra_kv).items() if name.endswith("_matmul"))

    def window_forward_flops(self, T: int, extra_kv: bool = False) -> int:
        return sum(self.breakdown(T, extra_kv).values())

    def recurrence_breakdown(self, T: int) -> dict[str, int]:
        """Pooling plus carry FFN for one window of T positions."""
        c = self.config
        k, L = c.hidden, c.layers
        ffn_matmul = sum(flops_matmul(1, fan_in, fan_out) for fan_in, fan_out in ffn_layer_shapes(c))
        hidden_widths = [fan_out for _, fan_out in ffn_layer_shapes(c)[:-1]]
        return {
            "layer_weights": SOFTMAX * L,
            "pool_mean": L * T * k,
            "pool_mix_matmul": flops_matmul(1, L, k),
            "ffn_matmul": ffn_matmul,
            "ffn_elementwise": sum(fan_out for _, fan_out in ffn_layer_shapes(c))
            + GELU * sum(hidden_widths),
        }

    def recurrence_flops(self, T: int) -> int:
        return sum(self.recurrence_breakdown(T).values())

    def flops_per_token(self, T: int, overlap: int = 0, recurrent: bool = False) -> float:
        """Window cost (plus amortized recurrence cost) per freshly predicted token."""
        from .windowing import check_overlap

        check_overlap(T, overlap)
        total = self.window_forward_flops(T, extra_kv=recurrent)
        if recurrent:
            total += self.recurrence_flops(T)
        return total / (T - overlap)


def window_forward_flops(config: ModelConfig, T: int, extra_kv: bool = False) -> int:
    return FlopsModel(config).window_forward_flops(T, extra_kv)


def flops_per_token(config: ModelConfig, T: int, overlap: int = 0, recurrent: bool = False) -> float:
    """FLOPs per scored token at window T and overlap o.

    Raises:
        InvalidOverlapError: overlap outside 0..T-1
    """
    return FlopsModel(config).flops_per_token(T, overlap, recurrent)


def flops_table(
    config: ModelConfig, windows: list[int], overlaps: list[int], recurrent: bool
) -> list[dict[str, object]]:
    """CSV rows (T, overlap, mode, flops_per_token); invalid pairs are skipped."""
    model = FlopsModel(config)
    mode = "recurrent" if recurrent else "baseline"
    rows = []
    for T in windows:
        for o in overlaps:
            if not 0 <= o < T:
                logger.warning(f"Skipping T={T}, overlap={o}: overlap must be below T")
                continue
            rows.append(
                {
                    "T": T,
                    "overlap": o,
                    "mode": mode,
                    "flops_per_token": f"{model.flops_per_token(T, o, recurrent):.6e}",
                }
            )
    return rows
