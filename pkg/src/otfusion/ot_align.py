"""Multi-head entropic optimal-transport alignment of tokens to patches.

Each head projects both feature sets into its own subspace, builds a cost
that mixes negative scaled dot-product similarity with a learnable spatial
bias on box-center distance, and solves entropy-regularized OT with
log-domain Sinkhorn iterations. Head plans are averaged into the alignment
matrix, and per-token alignment entropy is the confidence signal consumed
by the fusion gate.

The Sinkhorn solve runs on the autodiff tape, so gradients flow through the
unrolled iterations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6


@dataclass
class HeadProjection:
    """Learnable per-head subspace maps plus the spatial bias weight."""

    w_tokens: Tensor  # (d, head_dim)
    w_patches: Tensor  # (d, head_dim)
    spatial_weight: Tensor  # scalar
    head_dim: int


@dataclass
class PositionGrid:
    """Normalized 2-D centers: token box centers and patch cell centers."""

    pos_tokens: np.ndarray  # (N, 2) in [0, 1]^2
    pos_patches: np.ndarray  # (M, 2) in [0, 1]^2

    def __post_init__(self) -> None:
        for name, arr in (("pos_tokens", self.pos_tokens), ("pos_patches", self.pos_patches)):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ValueError(f"{name} must be (n, 2), got {arr.shape}")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} coordinates must lie in [0, 1]")
            setattr(self, name, arr)

    def distances(self) -> np.ndarray:
        """Pairwise Euclidean distances, (N, M)."""
        delta = self.pos_tokens[:, None, :] - self.pos_patches[None, :, :]
        return np.sqrt((delta**2).sum(axis=2))


@dataclass
class TransportPlan:
    """Nonnegative coupling with its marginals and solver diagnostics."""

    pi: Tensor  # (N, M)
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    tau: float
    iterations_used: int
    marginal_violation: float
    violation_history: list[float] | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pi.values.shape

    def to_json(self) -> dict:
        return {
            "shape": list(self.pi.values.shape),
            "tau": self.tau,
            "iterations_used": self.iterations_used,
            "marginal_violation": self.marginal_violation,
            "values": self.pi.values.reshape(-1).tolist(),
        }


def init_heads(
    d: int, n_heads: int, rng: np.random.Generator, spatial_init: float = 0.1, scale: float = 0.5
) -> list[HeadProjection]:
    """Random projection heads partitioning width d into d/n_heads subspaces."""
    if d % n_heads != 0:
        raise ValueError(f"model width {d} is not divisible by {n_heads} heads")
    head_dim = d // n_heads
    heads = []
    for _ in range(n_heads):
        w_t = Tensor(rng.normal(0.0, scale / math.sqrt(d), (d, head_dim)), requires_grad=True)
        w_v = Tensor(rng.normal(0.0, scale / math.sqrt(d), (d, head_dim)), requires_grad=True)
        lam = Tensor(spatial_init, requires_grad=True)
        heads.append(HeadProjection(w_t, w_v, lam, head_dim))
    return heads


def project_heads(tokens: Tensor, patches: Tensor, heads: list[HeadProjection]) -> list[tuple[Tensor, Tensor]]:
    """Per-head subspace projections (tokens @ W_t, patches @ W_v)."""
    tokens, patches = ad.as_tensor(tokens), ad.as_tensor(patches)
    out = []
    for head in heads:
        if tokens.values.shape[1] != head.w_tokens.values.shape[0]:
            raise ValueError(
                f"feature width {tokens.values.shape[1]} does not match head projection {head.w_tokens.values.shape}"
            )
        out.append((ad.matmul(tokens, head.w_tokens), ad.matmul(patches, head.w_patches)))
    return out


def build_cost(
    tokens_h: Tensor,
    patches_h: Tensor,
    positions: PositionGrid,
    spatial_weight: Tensor | float,
    head_dim: int,
) -> Tensor:
    """Head cost: -similarity / sqrt(head_dim) + spatial_weight * center distance."""
    tokens_h, patches_h = ad.as_tensor(tokens_h), ad.as_tensor(patches_h)
    if tokens_h.values.shape[1] != head_dim or patches_h.values.shape[1] != head_dim:
        raise ValueError(
            f"projected widths {tokens_h.values.shape[1]}/{patches_h.values.shape[1]} "
            f"do not match head_dim {head_dim}"
        )
    sim = ad.matmul(tokens_h, ad.transpose(patches_h)) * (1.0 / math.sqrt(head_dim))
    spatial = ad.mul(ad.as_tensor(spatial_weight), Tensor(positions.distances()))
    return ad.add(ad.neg(sim), spatial)


def _check_marginal(name: str, m: np.ndarray, n: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {m.shape}")
    if m.min() < 0.0 or abs(m.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must be a probability vector (nonnegative, sum 1)")
    return m


def sinkhorn(
    cost: Tensor,
    tau: float,
    row_marginal: np.ndarray,
    col_marginal: np.ndarray,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    track_history: bool = False,
) -> TransportPlan:
    """Entropy-regularized OT by alternating log-domain row/column scaling.

    Returns the plan diag(u) exp(-cost/tau) diag(v) once the max-norm
    marginal violation drops to `tol`, or the plan after `max_iters` sweeps
    with the violation it reached. All updates use logsumexp with max
    subtraction, so small tau is safe.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    cost = ad.as_tensor(cost)
    n, m = cost.values.shape
    a = _check_marginal("row_marginal", row_marginal, n)
    b = _check_marginal("col_marginal", col_marginal, m)

    with np.errstate(divide="ignore"):
        log_a = Tensor(np.log(a).reshape(n, 1))
        log_b = Tensor(np.log(b).reshape(1, m))

    log_kernel = ad.mul(cost, -1.0 / tau)
    g = Tensor(np.zeros((1, m)))

    history: list[float] = []
    iterations = 0
    # After a column update the column marginals hold exactly, so convergence
    # is a row-sum check; the logsumexp feeding it is reused by the next sweep.
    row_lse = ad.logsumexp(ad.add(log_kernel, g), axis=1, keepdims=True)
    while True:
        iterations += 1
        f = ad.sub(log_a, row_lse)
        g = ad.sub(log_b, ad.logsumexp(ad.add(log_kernel, f), axis=0, keepdims=True))
        row_lse = ad.logsumexp(ad.add(log_kernel, g), axis=1, keepdims=True)
        row_sums = np.exp(f.values + row_lse.values)[:, 0]
        violation = float(np.abs(row_sums - a).max())
        if track_history:
            history.append(violation)
        if violation <= tol or iterations >= max_iters:
            break

    pi = ad.exp(ad.add(ad.add(log_kernel, f), g))
    violation = max(
        violation,
        float(np.abs(pi.values.sum(axis=0) - b).max()),
    )
    return TransportPlan(
        pi=pi,
        row_marginal=a,
        col_marginal=b,
        tau=tau,
        iterations_used=iterations,
        marginal_violation=violation,
        violation_history=history if track_history else None,
    )


@dataclass
class StackedPlans:
    """Plans of several heads solved together; slice h is head h's coupling."""

    pi: Tensor  # (H, n, m)
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    tau: float
    iterations_used: int
    violations: list[float]  # per head

    def head_plans(self) -> list[TransportPlan]:
        """Detached per-head TransportPlan views for diagnostics."""
        return [
            TransportPlan(
                pi=Tensor(self.pi.values[h]),
                row_marginal=self.row_marginal,
                col_marginal=self.col_marginal,
                tau=self.tau,
                iterations_used=self.iterations_used,
                marginal_violation=self.violations[h],
            )
            for h in range(self.pi.values.shape[0])
        ]


def _lse(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    return m + np.log(s), e / s


def sinkhorn_stacked(
    costs: list[Tensor],
    tau: float,
    row_marginal: np.ndarray,
    col_marginal: np.ndarray,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> StackedPlans:
    """All heads' solves batched into one fused tape node.

    Semantically identical to calling sinkhorn() per cost matrix, except
    that the heads share one iteration count (they stop when the slowest
    one converges). The node's backward replays the unrolled log-domain
    iterations in reverse, so gradients match the op-by-op solver exactly;
    see the equivalence tests.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    costs = [ad.as_tensor(c) for c in costs]
    n, m = costs[0].values.shape
    for c in costs:
        if c.values.shape != (n, m):
            raise ValueError(f"stacked costs must share a shape, got {c.values.shape} vs {(n, m)}")
    a = _check_marginal("row_marginal", row_marginal, n)
    b = _check_marginal("col_marginal", col_marginal, m)
    n_heads = len(costs)

    log_kernel = np.stack([c.values for c in costs]) * (-1.0 / tau)
    with np.errstate(divide="ignore"):
        log_a = np.log(a).reshape(1, n, 1)
        log_b = np.log(b).reshape(1, 1, m)

    keep_state = ad.tracing(*costs)
    row_softmaxes: list[np.ndarray] = []
    col_softmaxes: list[np.ndarray] = []
    r, row_soft = _lse(log_kernel, axis=2)  # g starts at zero
    iterations = 0
    while True:
        iterations += 1
        if keep_state:
            row_softmaxes.append(row_soft)
        f = log_a - r
        c, col_soft = _lse(log_kernel + f, axis=1)
        if keep_state:
            col_softmaxes.append(col_soft)
        g = log_b - c
        r, row_soft = _lse(log_kernel + g, axis=2)
        row_sums = np.exp(f + r)
        violation = np.abs(row_sums - a.reshape(1, n, 1)).max(axis=(1, 2))
        if violation.max() <= tol or iterations >= max_iters:
            break

    pi_values = np.exp(log_kernel + f + g)
    col_violation = np.abs(pi_values.sum(axis=1) - b.reshape(1, m)).max(axis=1)
    violations = np.maximum(violation, col_violation)

    def bwd(upstream: np.ndarray) -> tuple:
        d_log_pi = upstream * pi_values
        d_log_kernel = d_log_pi.copy()
        dg = d_log_pi.sum(axis=1, keepdims=True)
        df_out = d_log_pi.sum(axis=2, keepdims=True)
        for k in reversed(range(iterations)):
            t_col = col_softmaxes[k] * (-dg)
            d_log_kernel += t_col
            df = t_col.sum(axis=2, keepdims=True)
            if k == iterations - 1:
                df = df + df_out
            t_row = row_softmaxes[k] * (-df)
            d_log_kernel += t_row
            dg = t_row.sum(axis=1, keepdims=True)
        d_log_kernel *= -1.0 / tau
        return tuple(d_log_kernel[h] for h in range(n_heads))

    pi = ad.record_op(pi_values, "sinkhorn_stacked", tuple(costs), bwd)
    return StackedPlans(
        pi=pi,
        row_marginal=a,
        col_marginal=b,
        tau=tau,
        iterations_used=iterations,
        violations=[float(v) for v in violations],
    )


def exact_ot_oracle(cost, max_size: int = 8) -> tuple[float, np.ndarray]:
    """Exhaustive OT over permutation plans for square costs with uniform marginals.

    Enumerates all n! permutations, so n is capped at `max_size`.
    Returns (optimal cost, optimal plan), the plan carrying mass 1/n per match.
    """
    c = np.asarray(getattr(cost, "values", cost), dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"oracle needs a square cost matrix, got {c.shape}")
    n = c.shape[0]
    if n > max_size:
        raise ValueError(f"oracle enumerates permutations; n={n} exceeds cap {max_size}")
    best_cost = np.inf
    best_perm: tuple[int, ...] | None = None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        total = c[rows, perm].sum() / n
        if total < best_cost:
            best_cost = total
            best_perm = perm
    plan = np.zeros((n, n))
    plan[rows, best_perm] = 1.0 / n
    return float(best_cost), plan


def average_heads(plans: list[TransportPlan]) -> TransportPlan:
    """Equal-weighted average of per-head plans; stays in the transport polytope."""
    if not plans:
        raise ValueError("average_heads needs at least one plan")
    ref = plans[0]
    for p in plans[1:]:
        if p.shape != ref.shape:
            raise ValueError(f"plan shapes differ: {p.shape} vs {ref.shape}")
        if not np.array_equal(p.row_marginal, ref.row_marginal) or not np.array_equal(
            p.col_marginal, ref.col_marginal
        ):
            raise ValueError("plans to average must share their marginals")
    acc = plans[0].pi
    for p in plans[1:]:
        acc = ad.add(acc, p.pi)
    pi = ad.mul(acc, 1.0 / len(plans))
    violation = max(
        np.abs(pi.values.sum(axis=1) - ref.row_marginal).max(),
        np.abs(pi.values.sum(axis=0) - ref.col_marginal).max(),
    )
    return TransportPlan(
        pi=pi,
        row_marginal=ref.row_marginal,
        col_marginal=ref.col_marginal,
        tau=ref.tau,
        iterations_used=max(p.iterations_used for p in plans),
        marginal_violation=float(violation),
    )


def row_entropy_confidence(plan: TransportPlan | Tensor) -> Tensor:
    """Shannon entropy of each row-normalized plan row, as an (N, 1) tensor.

    Rows are renormalized to sum to one before taking the entropy; an
    all-zero row is defined to have maximal entropy log M.
    """
    pi = plan.pi if isinstance(plan, TransportPlan) else ad.as_tensor(plan)
    n, m = pi.values.shape
    row_sums = ad.sum(pi, axis=1, keepdims=True)
    zero_rows = (row_sums.values == 0.0).astype(np.float64)
    # Zero rows are replaced by an exactly uniform row, whose entropy is log M.
    p_hat = ad.div(ad.add(pi, Tensor(zero_rows / m)), ad.add(row_sums, Tensor(zero_rows)))
    log_p = ad.log(ad.clamp(p_hat, 1e-12, 1.0))
    return ad.neg(ad.sum(ad.mul(p_hat, log_p), axis=1, keepdims=True))
