"""REINFORCE and sequence-level clipped-GRPO references, plus optimizers.

REINFORCE is the plain advantage-weighted sum of sequence log-probability
gradients. GRPO reuses the same sampled microbatch over several inner epochs,
weighting each sequence by its importance ratio to the sampling-time policy
and dropping (clipping flat) sequences whose ratio left [1-eps, 1+eps] in the
unfavorable direction. On the first inner epoch the ratio is exactly 1 and
the two gradients coincide.

Both optimizers follow the descent convention theta <- theta - lr * g, so the
training loop passes the negated ascent gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NonFiniteGradientError
from .policy import PolicyNet, score_sequence, sequence_logprob
from .tasks import Microbatch


@dataclass
class OldPolicySnapshot:
    """Per-sequence log-probabilities under the policy that sampled them."""

    logprobs: np.ndarray

    def __post_init__(self) -> None:
        self.logprobs = np.asarray(self.logprobs, dtype=float)
        if not np.all(np.isfinite(self.logprobs)):
            raise ContractViolation("snapshot log-probabilities must be finite")


def snapshot_logprobs(microbatch: Microbatch) -> OldPolicySnapshot:
    return OldPolicySnapshot(np.array([r.logprob for r in microbatch.records]))


def reinforce_grad(microbatch: Microbatch) -> list[np.ndarray]:
    """Per-layer sum of advantage-weighted sequence gradients."""
    records = microbatch.records
    advantages = microbatch.advantages
    grads = [np.zeros_like(g) for g in records[0].seq_grads]
    for adv, rec in zip(advantages, records):
        for l, g in enumerate(rec.seq_grads):
            grads[l] += adv * g
    return grads


def _clip_active(rho: float, advantage: float, clip_eps: float) -> bool:
    # gradient flows through the min() only while the ratio branch is active
    if advantage >= 0:
        return rho <= 1.0 + clip_eps
    return rho >= 1.0 - clip_eps


def grpo_clipped_grad(
    microbatch: Microbatch,
    snapshot: OldPolicySnapshot,
    net: PolicyNet,
    clip_eps: float,
) -> list[np.ndarray]:
    """Gradient of sum_o min(rho_o A_o, clip(rho_o, 1-eps, 1+eps) A_o) at ``net``."""
    if clip_eps <= 0:
        raise ContractViolation(f"clip_eps must be positive, got {clip_eps}")
    records = microbatch.records
    if snapshot.logprobs.shape != (len(records),):
        raise ContractViolation("snapshot size does not match microbatch")
    advantages = microbatch.advantages
    grads = [np.zeros_like(g) for g in records[0].seq_grads]
    for i, rec in enumerate(records):
        prompt = microbatch.prompt_for(i)
        current = score_sequence(net, prompt, rec.tokens)
        rho = math.exp(current.logprob - snapshot.logprobs[i])
        if not _clip_active(rho, advantages[i], clip_eps):
            continue
        coeff = rho * advantages[i]
        for l, g in enumerate(current.seq_grads):
            grads[l] += coeff * g
    return grads


def grpo_surrogate(
    microbatch: Microbatch,
    snapshot: OldPolicySnapshot,
    net: PolicyNet,
    clip_eps: float,
) -> float:
    """Scalar clipped surrogate objective (used by gradient checks)."""
    total = 0.0
    advantages = microbatch.advantages
    for i, rec in enumerate(microbatch.records):
        prompt = microbatch.prompt_for(i)
        rho = math.exp(sequence_logprob(net, prompt, rec.tokens) - snapshot.logprobs[i])
        clipped = min(max(rho, 1.0 - clip_eps), 1.0 + clip_eps)
        total += min(rho * advantages[i], clipped * advantages[i])
    return total


def reinforce_surrogate(microbatch: Microbatch, net: PolicyNet) -> float:
    """Scalar objective sum_o A_o log pi(o) (used by gradient checks)."""
    total = 0.0
    for i, rec in enumerate(microbatch.records):
        prompt = microbatch.prompt_for(i)
        total += microbatch.advantages[i] * sequence_logprob(net, prompt, rec.tokens)
    return total


@dataclass
class OptimizerState:
    """SGD or AdamW state over the policy's list-of-matrices parameters."""

    kind: str = "adamw"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    exp_avg: list | None = None
    exp_avg_sq: list | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adamw"):
            raise ContractViolation(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ContractViolation("learning rate must be positive")


def make_optimizer(kind: str = "adamw", lr: float = 3e-4, **kwargs) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr, **kwargs)


def optimizer_step(state: OptimizerState, net: PolicyNet, grads: list[np.ndarray]) -> PolicyNet:
    """Apply theta <- theta - lr * (preconditioned) grads in place.

    AdamW uses the standard bias-corrected moment estimates with decoupled
    weight decay. Raises NonFiniteGradientError (before touching any weight)
    if a gradient contains NaN or infinities.
    """
    if len(grads) != net.n_layers:
        raise ContractViolation(f"{len(grads)} gradients for {net.n_layers} layers")
    for l, (w, g) in enumerate(zip(net.weights, grads)):
        if g.shape != w.shape:
            raise ContractViolation(f"layer {l} gradient shape {g.shape} != {w.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(
                f"layer {l} gradient has {bad} non-finite entries at step {state.step_count + 1}"
            )
    if state.kind == "sgd":
        for w, g in zip(net.weights, grads):
            w -= state.lr * g
        state.step_count += 1
        return net

    if state.exp_avg is None:
        state.exp_avg = [np.zeros_like(w) for w in net.weights]
        state.exp_avg_sq = [np.zeros_like(w) for w in net.weights]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for w, g, m, v in zip(net.weights, grads, state.exp_avg, state.exp_avg_sq):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            w -= state.lr * state.weight_decay * w
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return net
