"""Exact brute-force references for tiny, fully enumerable policies.

Everything here is ground truth obtained without sampling: the Fisher matrix
is the exact output-distribution second moment of flattened log-probability
gradients, computed by enumerating every possible output sequence. These
oracles exist to test the stochastic estimators and layer-wise preconditioned
updates against, and are shipped in the library (not in the test tree) so the
CLI can expose them as a self-check.

Dense solves in this module deliberately go through numpy's LAPACK bindings
rather than the package's own eigensolver, so the two routes stay independent.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, EnumerationBudgetError, SingularMatrixError
from .policy import PolicyNet, SequenceRecord, score_sequence, seq_len_for

MAX_ENUM_OUTPUTS = 10_000
MAX_ORACLE_PARAMS = 1_000


@dataclass
class ExactFisher:
    """Dense Fisher matrix over flattened parameters plus the layer layout."""

    matrix: np.ndarray
    layout: list[tuple[int, int]]

    @property
    def n_params(self) -> int:
        return self.matrix.shape[0]


def flatten_layer_mats(mats: list[np.ndarray]) -> np.ndarray:
    """Concatenate layer matrices row-major into one parameter vector."""
    return np.concatenate([np.asarray(m, dtype=float).ravel() for m in mats])


def unflatten_params(vec: np.ndarray, layout: list[tuple[int, int]]) -> list[np.ndarray]:
    total = sum(rows * cols for rows, cols in layout)
    if vec.size != total:
        raise ContractViolation(f"vector of size {vec.size} does not match layout ({total})")
    mats = []
    pos = 0
    for rows, cols in layout:
        size = rows * cols
        mats.append(vec[pos : pos + size].reshape(rows, cols).copy())
        pos += size
    return mats


def _check_budget(net: PolicyNet, prompts) -> int:
    if not prompts:
        raise ContractViolation("need at least one prompt")
    seq_len = seq_len_for(net, prompts[0])
    for p in prompts:
        if seq_len_for(net, p) != seq_len:
            raise ContractViolation("prompts imply different sequence lengths")
    n_outputs = net.vocab_size**seq_len
    if n_outputs > MAX_ENUM_OUTPUTS:
        raise EnumerationBudgetError(
            f"{n_outputs} outputs per prompt exceeds the enumeration budget"
        )
    if net.param_count > MAX_ORACLE_PARAMS:
        raise EnumerationBudgetError(
            f"{net.param_count} parameters exceeds the oracle budget"
        )
    return seq_len


def enumerate_scored_outputs(net: PolicyNet, prompt):
    """Yield (tokens, probability, flattened gradient) over all outputs."""
    seq_len = seq_len_for(net, prompt)
    for tokens in itertools.product(range(net.vocab_size), repeat=seq_len):
        rec = score_sequence(net, prompt, tokens)
        yield tokens, math.exp(rec.logprob), flatten_layer_mats(rec.seq_grads)


def exact_fisher(net: PolicyNet, prompts) -> ExactFisher:
    """F = mean over prompts of sum_o pi(o|q) grad(o) grad(o)^T, exactly."""
    _check_budget(net, prompts)
    n = net.param_count
    fisher = np.zeros((n, n))
    for prompt in prompts:
        rows = []
        probs = []
        for _, prob, grad in enumerate_scored_outputs(net, prompt):
            rows.append(grad)
            probs.append(prob)
        probs = np.array(probs)
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ArithmeticError(f"enumerated probabilities sum to {probs.sum()}")
        g = np.stack(rows)
        fisher += (g * probs[:, None]).T @ g
    fisher /= len(prompts)
    fisher = 0.5 * (fisher + fisher.T)
    return ExactFisher(fisher, [w.shape for w in net.weights])


def fisher_quadratic(net: PolicyNet, prompts, v: np.ndarray) -> float:
    """Direct enumeration of E[(grad . v)^2]; the defining quadratic form."""
    _check_budget(net, prompts)
    v = np.asarray(v, dtype=float)
    total = 0.0
    for prompt in prompts:
        for _, prob, grad in enumerate_scored_outputs(net, prompt):
            total += prob * float(grad @ v) ** 2
    return total / len(prompts)


def layer_moments(net: PolicyNet, prompts, layer: int) -> tuple[np.ndarray, float]:
    """Exact (F_layer, E|grad_layer|^2) for one layer by enumeration."""
    _check_budget(net, prompts)
    rows, cols = net.weights[layer].shape
    size = rows * cols
    fisher = np.zeros((size, size))
    mean_sq = 0.0
    for prompt in prompts:
        for tokens in itertools.product(range(net.vocab_size), repeat=seq_len_for(net, prompt)):
            rec = score_sequence(net, prompt, tokens)
            g = rec.seq_grads[layer].ravel()
            prob = math.exp(rec.logprob)
            fisher += prob * np.outer(g, g)
            mean_sq += prob * float(g @ g)
    return fisher / len(prompts), mean_sq / len(prompts)


def exact_npg(fisher: ExactFisher, g: np.ndarray, damping: float) -> np.ndarray:
    """Solve (F + damping I) v = g densely; the natural-gradient reference."""
    if damping < 0:
        raise ContractViolation(f"damping must be nonnegative, got {damping}")
    g = np.asarray(g, dtype=float)
    n = fisher.n_params
    if g.shape != (n,):
        raise ContractViolation(f"gradient shape {g.shape} != ({n},)")
    system = fisher.matrix + damping * np.eye(n)
    try:
        v = np.linalg.solve(system, g)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from exc
    residual = np.linalg.norm(system @ v - g)
    if not np.all(np.isfinite(v)) or residual > 1e-6 * max(np.linalg.norm(g), 1e-300):
        raise SingularMatrixError(
            f"dense solve failed (residual {residual:.3e}); add damping"
        )
    return v


def materialize_position_grads(record: SequenceRecord, layer: int) -> list[np.ndarray]:
    """Full rank-one matrices outer(g_out_j, a_in_j) for every position."""
    factors = record.factors[layer]
    return [np.outer(factors.grad_out[j], factors.act_in[j]) for j in range(len(factors))]


def naive_fisher_norm(v: np.ndarray, mats: list[np.ndarray]) -> float:
    """Reference estimator on fully materialized position-gradient matrices."""
    if not mats:
        raise ContractViolation("need at least one materialized gradient")
    v = np.asarray(v, dtype=float)
    num = math.fsum(float(np.sum(v * g)) ** 2 for g in mats)
    den = math.fsum(float(np.sum(g * g)) for g in mats)
    if den == 0.0:
        raise ContractViolation("all materialized gradients are zero")
    return math.sqrt(num) / math.sqrt(den)
