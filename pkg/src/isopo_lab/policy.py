"""Small autoregressive softmax policies with a hand-written backward pass.

A policy is a stack of linear layers with tanh between them, applied
independently at each output position. The context fed to the network at
position ``t`` is

    [ one-hot(previous token) | one-hot(t) | prompt features ]

and the final layer produces one logit per vocabulary token. Sampled tokens
are discrete, so the log-probability of a sequence decomposes per position
and its gradient with respect to a layer's weights is a sum of rank-one
terms: the outer product of the back-propagated pre-activation gradient and
the (bias-augmented) layer input at that position. The backward pass records
exactly those factor pairs; they are the raw material for the Fisher-norm
estimator and the per-sequence reduced gradients.

Biases are handled by augmenting every layer input with a trailing constant
1, so each position's gradient is a single rank-one matrix with no special
case for the bias column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

CHECKPOINT_MAGIC = "isopo-lab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class PolicyNet:
    """Stack of linear layers; ``weights[l]`` has shape (out_dim, in_dim + 1).

    The last column of every weight matrix is the bias (inputs are augmented
    with a constant 1). The final layer's output dimension is the vocabulary
    size.
    """

    weights: list[np.ndarray]
    vocab_size: int
    context_dim: int

    def __post_init__(self) -> None:
        if not self.weights:
            raise ContractViolation("policy needs at least one layer")
        expected_in = self.context_dim
        for i, w in enumerate(self.weights):
            if w.ndim != 2:
                raise ContractViolation(f"layer {i} weight must be 2-D")
            if w.shape[1] != expected_in + 1:
                raise ContractViolation(
                    f"layer {i} expects input dim {w.shape[1] - 1}, got {expected_in}"
                )
            expected_in = w.shape[0]
        if self.weights[-1].shape[0] != self.vocab_size:
            raise ContractViolation(
                f"final layer outputs {self.weights[-1].shape[0]} logits, "
                f"vocab is {self.vocab_size}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def param_count(self) -> int:
        return int(sum(w.size for w in self.weights))

    def copy(self) -> "PolicyNet":
        return PolicyNet([w.copy() for w in self.weights], self.vocab_size, self.context_dim)


@dataclass
class PositionGradFactors:
    """Stacked per-position rank-one gradient factors for one layer.

    Row ``j`` is position ``j``'s pair: ``act_in[j]`` is the layer input at
    that position augmented with a trailing 1, ``grad_out[j]`` the gradient of
    the summed log-probability with respect to the layer's pre-activation.
    The position's full weight gradient is ``outer(grad_out[j], act_in[j])``.
    """

    act_in: np.ndarray  # (n_positions, in_dim + 1)
    grad_out: np.ndarray  # (n_positions, out_dim)

    def __len__(self) -> int:
        return self.act_in.shape[0]


@dataclass
class ForwardTrace:
    """Activations recorded during one position's forward pass."""

    act_in: list[np.ndarray]  # augmented input per layer
    hidden: list[np.ndarray]  # tanh output per hidden layer
    logits: np.ndarray


@dataclass
class SequenceRecord:
    """One sampled (or teacher-forced) sequence with its gradient factors."""

    prompt_id: str
    tokens: tuple[int, ...]
    logprob: float
    factors: list[PositionGradFactors]  # per layer
    seq_grads: list[np.ndarray]  # per layer, reduced over positions


def init_policy(
    vocab_size: int,
    context_dim: int,
    hidden: tuple[int, ...],
    rng: np.random.Generator,
) -> PolicyNet:
    """Fresh policy with weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)), zero bias."""
    dims = [context_dim, *hidden, vocab_size]
    weights = []
    for in_dim, out_dim in zip(dims[:-1], dims[1:]):
        scale = 1.0 / math.sqrt(in_dim)
        w = np.zeros((out_dim, in_dim + 1))
        w[:, :in_dim] = rng.uniform(-scale, scale, size=(out_dim, in_dim))
        weights.append(w)
    return PolicyNet(weights, vocab_size, context_dim)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / np.sum(e)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits)
    return z - np.log(np.sum(np.exp(z)))


def forward_logits(net: PolicyNet, context) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on one context vector, recording activations."""
    x = np.asarray(context, dtype=float)
    if x.shape != (net.context_dim,):
        raise ContractViolation(f"context shape {x.shape}, expected ({net.context_dim},)")
    act_in: list[np.ndarray] = []
    hidden: list[np.ndarray] = []
    n = net.n_layers
    z = x
    for l, w in enumerate(net.weights):
        a = np.append(x, 1.0)
        act_in.append(a)
        z = w @ a
        if l < n - 1:
            x = np.tanh(z)
            hidden.append(x)
    return z, ForwardTrace(act_in, hidden, z)


def seq_len_for(net: PolicyNet, prompt) -> int:
    """Sequence length implied by the context layout for this prompt."""
    t = net.context_dim - net.vocab_size - len(prompt.features)
    if t < 1:
        raise ContractViolation(
            f"context dim {net.context_dim} too small for vocab {net.vocab_size} "
            f"and {len(prompt.features)} prompt features"
        )
    return t


def build_context(net: PolicyNet, prompt, t: int, prev_token: int | None) -> np.ndarray:
    seq_len = seq_len_for(net, prompt)
    if not 0 <= t < seq_len:
        raise ContractViolation(f"position {t} outside sequence length {seq_len}")
    ctx = np.zeros(net.context_dim)
    if prev_token is not None:
        ctx[prev_token] = 1.0
    ctx[net.vocab_size + t] = 1.0
    ctx[net.vocab_size + seq_len :] = prompt.features
    return ctx


def backward_logprob(
    net: PolicyNet,
    traces: list[ForwardTrace],
    tokens,
    loss_mask=None,
) -> tuple[list[PositionGradFactors], list[np.ndarray]]:
    """Gradient of sum_t log softmax(logits_t)[token_t] w.r.t. every layer.

    Returns the per-position factor pairs and the reduced per-layer gradient
    (the sum of the rank-one terms). ``loss_mask`` optionally weights each
    position's log-probability term (used to probe which positions a factor
    aggregates).
    """
    tokens = list(tokens)
    if len(traces) != len(tokens):
        raise ContractViolation(
            f"{len(traces)} recorded positions but {len(tokens)} tokens"
        )
    n = net.n_layers
    act_rows: list[list[np.ndarray]] = [[] for _ in range(n)]
    gout_rows: list[list[np.ndarray]] = [[] for _ in range(n)]
    for t, trace in enumerate(traces):
        token = tokens[t]
        if not 0 <= token < net.vocab_size:
            raise ContractViolation(f"token {token} outside vocab {net.vocab_size}")
        weight = 1.0 if loss_mask is None else float(loss_mask[t])
        g = -softmax(trace.logits)
        g[token] += 1.0
        g *= weight
        for l in range(n - 1, -1, -1):
            act_rows[l].append(trace.act_in[l])
            gout_rows[l].append(g)
            if l > 0:
                h = trace.hidden[l - 1]
                g = (net.weights[l][:, :-1].T @ g) * (1.0 - h * h)
    factors = [
        PositionGradFactors(np.array(act_rows[l]), np.array(gout_rows[l]))
        for l in range(n)
    ]
    seq_grads = [f.grad_out.T @ f.act_in for f in factors]
    return factors, seq_grads


def _roll(
    net: PolicyNet,
    prompt,
    tokens=None,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
    keep_trace: bool = True,
):
    """Shared forward loop for sampling, greedy decoding and scoring."""
    seq_len = seq_len_for(net, prompt)
    if tokens is not None:
        tokens = list(tokens)
        if len(tokens) != seq_len:
            raise ContractViolation(f"expected {seq_len} tokens, got {len(tokens)}")
    out_tokens: list[int] = []
    traces: list[ForwardTrace] = []
    logprob = 0.0
    prev: int | None = None
    for t in range(seq_len):
        ctx = build_context(net, prompt, t, prev)
        logits, trace = forward_logits(net, ctx)
        logp = log_softmax(logits)
        if tokens is not None:
            token = tokens[t]
        elif greedy:
            token = int(np.argmax(logits))
        else:
            if rng is None:
                raise ContractViolation("sampling requires a seeded generator")
            probs = softmax(logits)
            cdf = np.cumsum(probs)
            token = int(min(np.searchsorted(cdf, rng.random(), side="right"),
                            net.vocab_size - 1))
        logprob += float(logp[token])
        out_tokens.append(token)
        if keep_trace:
            traces.append(trace)
        prev = token
    return out_tokens, logprob, traces


def sample_sequence(net: PolicyNet, prompt, rng: np.random.Generator) -> SequenceRecord:
    """Draw one sequence token by token from the policy and backprop through it."""
    tokens, logprob, traces = _roll(net, prompt, rng=rng)
    factors, seq_grads = backward_logprob(net, traces, tokens)
    return SequenceRecord(prompt.id, tuple(tokens), logprob, factors, seq_grads)


def score_sequence(net: PolicyNet, prompt, tokens) -> SequenceRecord:
    """Teacher-forced log-probability and gradients of a given token sequence."""
    toks, logprob, traces = _roll(net, prompt, tokens=tokens)
    factors, seq_grads = backward_logprob(net, traces, toks)
    return SequenceRecord(prompt.id, tuple(toks), logprob, factors, seq_grads)


def greedy_sequence(net: PolicyNet, prompt) -> tuple[int, ...]:
    """Argmax decoding; deterministic."""
    tokens, _, _ = _roll(net, prompt, greedy=True, keep_trace=False)
    return tuple(tokens)


def sequence_logprob(net: PolicyNet, prompt, tokens) -> float:
    """Log-probability of a given token sequence, no gradients."""
    _, logprob, _ = _roll(net, prompt, tokens=tokens, keep_trace=False)
    return logprob


def _sample_tokens(net: PolicyNet, prompt, rng: np.random.Generator) -> tuple[list[int], float]:
    tokens, logprob, _ = _roll(net, prompt, rng=rng, keep_trace=False)
    return tokens, logprob


def kl_from_reference(
    net: PolicyNet,
    ref: PolicyNet,
    prompts,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo estimate of KL(net || ref) averaged over prompts.

    Samples are allocated round-robin over prompts in sorted-id order, so the
    estimate does not depend on the order the prompts are passed in.
    """
    if [w.shape for w in net.weights] != [w.shape for w in ref.weights]:
        raise ContractViolation("policies must share an architecture")
    ordered = sorted(prompts, key=lambda p: p.id)
    if not ordered:
        raise ContractViolation("need at least one prompt")
    diffs = []
    for i in range(n_samples):
        prompt = ordered[i % len(ordered)]
        tokens, lp = _sample_tokens(net, prompt, rng)
        diffs.append(lp - sequence_logprob(ref, prompt, tokens))
    return math.fsum(diffs) / n_samples


def save_checkpoint(net: PolicyNet, path) -> None:
    """Text checkpoint with hex floats; round-trips bit-exactly."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines.append(f"vocab_size {net.vocab_size}")
    lines.append(f"context_dim {net.context_dim}")
    lines.append(f"layers {net.n_layers}")
    for i, w in enumerate(net.weights):
        lines.append(f"layer {i} {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(v.hex() for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> PolicyNet:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split()
    if header[0] != CHECKPOINT_MAGIC or int(header[1]) != CHECKPOINT_VERSION:
        raise ContractViolation(f"unrecognized checkpoint header: {lines[0]!r}")
    vocab = int(lines[1].split()[1])
    context_dim = int(lines[2].split()[1])
    n_layers = int(lines[3].split()[1])
    weights = []
    pos = 4
    for i in range(n_layers):
        tag, idx, rows, cols = lines[pos].split()
        if tag != "layer" or int(idx) != i:
            raise ContractViolation(f"malformed checkpoint at line {pos + 1}")
        rows, cols = int(rows), int(cols)
        pos += 1
        w = np.empty((rows, cols))
        for r in range(rows):
            vals = [float.fromhex(tok) for tok in lines[pos].split()]
            if len(vals) != cols:
                raise ContractViolation(f"checkpoint row width mismatch at line {pos + 1}")
            w[r] = vals
            pos += 1
        weights.append(w)
    return PolicyNet(weights, vocab, context_dim)
