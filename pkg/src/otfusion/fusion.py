"""Fusion of the attention path with the OT aggregation path, gated per token.

The global path is standard multi-head scaled dot-product attention with
tokens as queries and patches as keys/values. The local path aggregates
patches under the row-renormalized transport plan and modulates them with
the token features. Their sum is injected into each token through a
sigmoid gate fed by the token, the fused feature, and the alignment
entropy, so the output is a per-token convex combination of the original
and fused representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ot_align import TransportPlan

OT_AGGREGATION_MODES = ("elementwise", "sum")


@dataclass
class FusionParams:
    """Attention projections plus the gate's affine map."""

    w_query: Tensor  # (d, d)
    w_key: Tensor  # (d, d)
    w_value: Tensor  # (d, d)
    w_out: Tensor  # (d, d)
    n_heads: int
    w_gate: Tensor  # (2d + 1, 1)
    gate_bias: Tensor  # scalar


@dataclass
class GateState:
    """Per-token fusion internals, kept for inspection and tests."""

    f_att: Tensor | None
    f_ot: Tensor | None
    f_fusion: Tensor
    conf: Tensor
    gate: Tensor  # (N, 1), entries in (0, 1)
    gated_tokens: Tensor  # (N, d)

    def to_json(self) -> dict:
        return {
            "gate": self.gate.values.reshape(-1).tolist(),
            "conf": self.conf.values.reshape(-1).tolist(),
        }


def init_fusion_params(d: int, n_heads: int, rng: np.random.Generator) -> FusionParams:
    """Random attention maps; the gate starts at zero so every gate opens at 0.5."""
    if d % n_heads != 0:
        raise ValueError(f"model width {d} is not divisible by {n_heads} attention heads")
    scale = 1.0 / math.sqrt(d)
    mat = lambda: Tensor(rng.normal(0.0, scale, (d, d)), requires_grad=True)
    return FusionParams(
        w_query=mat(),
        w_key=mat(),
        w_value=mat(),
        w_out=mat(),
        n_heads=n_heads,
        w_gate=Tensor(np.zeros((2 * d + 1, 1)), requires_grad=True),
        gate_bias=Tensor(0.0, requires_grad=True),
    )


def scaled_dot_attention(queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Single-head attention: softmax(q k^T / sqrt(d_head)) @ v."""
    d_head = queries.values.shape[1]
    scores = ad.mul(ad.matmul(queries, ad.transpose(keys)), 1.0 / math.sqrt(d_head))
    return ad.matmul(ad.softmax(scores, axis=1), values)


def cross_attention(tokens: Tensor, patches: Tensor, params: FusionParams) -> Tensor:
    """Multi-head attention with tokens as queries, patches as keys and values."""
    tokens, patches = ad.as_tensor(tokens), ad.as_tensor(patches)
    d = tokens.values.shape[1]
    if patches.values.shape[1] != d:
        raise ValueError(f"token width {d} and patch width {patches.values.shape[1]} differ")
    if d % params.n_heads != 0:
        raise ValueError(f"width {d} is not divisible by {params.n_heads} heads")
    d_head = d // params.n_heads
    q = ad.matmul(tokens, params.w_query)
    k = ad.matmul(patches, params.w_key)
    v = ad.matmul(patches, params.w_value)
    contexts = []
    for h in range(params.n_heads):
        start = h * d_head
        contexts.append(
            scaled_dot_attention(
                ad.narrow(q, 1, start, d_head),
                ad.narrow(k, 1, start, d_head),
                ad.narrow(v, 1, start, d_head),
            )
        )
    stacked = contexts[0] if len(contexts) == 1 else ad.concat(contexts, axis=1)
    return ad.matmul(stacked, params.w_out)


def ot_aggregate(tokens: Tensor, patches: Tensor, plan: TransportPlan | Tensor, mode: str = "elementwise") -> Tensor:
    """Aggregate patches under the row-renormalized plan.

    "elementwise" modulates the aggregate by the token features
    (tokens * (plan_hat @ patches)); "sum" returns the bare aggregate.
    A row with no transport mass aggregates to zero.
    """
    if mode not in OT_AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {OT_AGGREGATION_MODES}")
    tokens, patches = ad.as_tensor(tokens), ad.as_tensor(patches)
    pi = plan.pi if isinstance(plan, TransportPlan) else ad.as_tensor(plan)
    if pi.values.shape != (tokens.values.shape[0], patches.values.shape[0]):
        raise ValueError(
            f"plan shape {pi.values.shape} does not couple {tokens.values.shape[0]} tokens "
            f"with {patches.values.shape[0]} patches"
        )
    row_sums = ad.sum(pi, axis=1, keepdims=True)
    safe = ad.add(row_sums, Tensor((row_sums.values == 0.0).astype(np.float64)))
    aggregated = ad.matmul(ad.div(pi, safe), patches)
    if mode == "sum":
        return aggregated
    return ad.mul(tokens, aggregated)


def fuse(f_att: Tensor, f_ot: Tensor) -> Tensor:
    """Elementwise sum of the two paths."""
    f_att, f_ot = ad.as_tensor(f_att), ad.as_tensor(f_ot)
    if f_att.values.shape != f_ot.values.shape:
        raise ValueError(f"path shapes differ: {f_att.values.shape} vs {f_ot.values.shape}")
    return ad.add(f_att, f_ot)


def gate_tokens(
    tokens: Tensor,
    f_fusion: Tensor,
    conf: Tensor,
    w_gate: Tensor,
    gate_bias: Tensor | float,
    f_att: Tensor | None = None,
    f_ot: Tensor | None = None,
) -> GateState:
    """Sigmoid-gated convex mix of each token with its fused feature.

    gate_i = sigmoid(w_gate . [token_i ; fused_i ; conf_i] + bias), and the
    output row is gate_i * fused_i + (1 - gate_i) * token_i.
    """
    tokens, f_fusion, conf = ad.as_tensor(tokens), ad.as_tensor(f_fusion), ad.as_tensor(conf)
    n, d = tokens.values.shape
    if f_fusion.values.shape != (n, d):
        raise ValueError(f"fused shape {f_fusion.values.shape} does not match tokens {(n, d)}")
    if conf.values.shape != (n, 1):
        raise ValueError(f"conf must be ({n}, 1), got {conf.values.shape}")
    w_gate = ad.as_tensor(w_gate)
    if w_gate.values.shape != (2 * d + 1, 1):
        raise ValueError(f"gate weight must be ({2 * d + 1}, 1), got {w_gate.values.shape}")
    gate_in = ad.concat([tokens, f_fusion, conf], axis=1)
    gate = ad.sigmoid(ad.add(ad.matmul(gate_in, w_gate), ad.as_tensor(gate_bias)))
    gated = ad.add(ad.mul(gate, f_fusion), ad.mul(ad.sub(1.0, gate), tokens))
    return GateState(f_att=f_att, f_ot=f_ot, f_fusion=f_fusion, conf=conf, gate=gate, gated_tokens=gated)
