"""Self-check suites behind the ``gradcheck`` and ``oracle-check`` commands.

Each suite compares an implementation path against an independent reference
(central finite differences, fully materialized position gradients, a dense
flattened solve, or exact enumeration) and reports its worst error. The CLI
exits nonzero if any suite fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import baselines, isopo, oracle, policy, tasks
from .rng import stream

FD_STEP = 1e-5
FD_RTOL = 1e-5
FD_FLOOR = 1e-3  # denominator floor so near-zero entries compare absolutely


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""


def fd_grad(objective, net: policy.PolicyNet, step: float = FD_STEP) -> list[np.ndarray]:
    """Central finite differences of a scalar objective over every weight."""
    grads = []
    for w in net.weights:
        g = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                orig = w[i, j]
                w[i, j] = orig + step
                up = objective()
                w[i, j] = orig - step
                down = objective()
                w[i, j] = orig
                g[i, j] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FD_FLOOR)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def _check_net(seed: int) -> tuple[policy.PolicyNet, tasks.SeqAdditionTask]:
    task = tasks.SeqAdditionTask(modulus=5, seq_len=2)
    context_dim = task.vocab_size + task.seq_len + task.feature_dim
    net = policy.init_policy(task.vocab_size, context_dim, (6,), stream(seed, "check-init"))
    return net, task


def _check_microbatch(net, task, seed: int, n_groups: int = 2, group_size: int = 4):
    groups = []
    for gi in range(n_groups):
        prompt = task.train_prompts[(seed + 3 * gi) % len(task.train_prompts)]
        records = [
            policy.sample_sequence(net, prompt, stream(seed, f"check/{gi}/{k}"))
            for k in range(group_size)
        ]
        rewards = np.array([task.reward(prompt, r.tokens) for r in records])
        advantages = tasks.group_advantages(rewards)
        if not np.any(advantages):
            advantages = advantages + np.linspace(-0.5, 0.5, group_size)
            advantages -= advantages.mean()
        groups.append(tasks.Group(prompt, records, rewards, advantages))
    return tasks.Microbatch(groups)


def run_gradcheck(seed: int = 0, grad_tamper=None) -> list[SuiteResult]:
    """Finite-difference and estimator-equivalence suites on a fresh random net.

    ``grad_tamper`` optionally corrupts computed gradients before comparison;
    it exists as a negative control so tests can verify the checks can fail.
    """
    results = []
    net, task = _check_net(seed)

    def tamper(grads):
        return grad_tamper(grads) if grad_tamper is not None else grads

    # 1. manual backward vs central differences of one sequence's log-probability
    prompt = task.train_prompts[0]
    record = policy.sample_sequence(net, prompt, stream(seed, "gradcheck-seq"))
    analytic = tamper([g.copy() for g in record.seq_grads])
    numeric = fd_grad(lambda: policy.sequence_logprob(net, prompt, record.tokens), net)
    err = max_rel_error(analytic, numeric)
    results.append(SuiteResult("policy-backward-fd", err <= FD_RTOL, err))

    # 2. REINFORCE gradient vs differences of sum_o A_o log pi(o)
    microbatch = _check_microbatch(net, task, seed)
    analytic = tamper(baselines.reinforce_grad(microbatch))
    numeric = fd_grad(lambda: baselines.reinforce_surrogate(microbatch, net), net)
    err = max_rel_error(analytic, numeric)
    results.append(SuiteResult("reinforce-surrogate-fd", err <= FD_RTOL, err))

    # 3. GRPO clipped-surrogate gradient, away from the sampling policy (rho != 1)
    snapshot = baselines.snapshot_logprobs(microbatch)
    shifted = net.copy()
    drift = stream(seed, "gradcheck-drift")
    for w in shifted.weights:
        w += 0.01 * drift.standard_normal(w.shape)
    clip_eps = 0.2
    analytic = tamper(baselines.grpo_clipped_grad(microbatch, snapshot, shifted, clip_eps))
    numeric = fd_grad(
        lambda: baselines.grpo_surrogate(microbatch, snapshot, shifted, clip_eps), shifted
    )
    err = max_rel_error(analytic, numeric)
    results.append(SuiteResult("grpo-surrogate-fd", err <= FD_RTOL, err))

    # 4. factor-form Fisher-norm estimate vs fully materialized position gradients
    overlap = isopo.draw_overlap_samples(microbatch, 16, stream(seed, "gradcheck-overlap"))
    worst = 0.0
    probe_rng = stream(seed, "gradcheck-probe")
    for l in range(net.n_layers):
        mats = []
        for rec in microbatch.records:
            mats.extend(oracle.materialize_position_grads(rec, l))
        sampled = [mats[i] for i in overlap.indices]
        for _ in range(5):
            v = probe_rng.standard_normal(net.weights[l].shape)
            fast = isopo.fisher_norm_estimate(v, overlap.layers[l], overlap.denominators[l])
            slow = oracle.naive_fisher_norm(v, sampled)
            worst = max(worst, abs(fast - slow) / max(slow, 1e-12))
    results.append(SuiteResult("rank-one-equivalence", worst <= 1e-10, worst))

    # 5. NTK-preconditioned update vs flattened dense solve
    worst = 0.0
    adv = microbatch.advantages
    for l in range(net.n_layers):
        seq_grads = [r.seq_grads[l] for r in microbatch.records]
        jac = np.stack([g.ravel() for g in seq_grads])
        c = 0.1 * float(np.mean(np.sum(jac * jac, axis=1))) + 1e-6
        update = isopo.interacting_update(seq_grads, adv, c)
        dense = jac.T @ np.linalg.solve(jac @ jac.T + c * np.eye(len(seq_grads)), adv)
        scale = max(float(np.linalg.norm(dense)), 1e-12)
        worst = max(worst, float(np.linalg.norm(update.ravel() - dense)) / scale)
    results.append(SuiteResult("ntk-dense-equivalence", worst <= 1e-9, worst))

    return results


def _tiny_oracle_policy(seed: int, seq_len: int = 2):
    """Enumerable policy: vocab 4, one hidden layer of width 4."""
    vocab = 4
    feat = stream(seed, "oracle-feat").uniform(-1.0, 1.0, size=2)
    prompt = tasks.Prompt(id=f"tiny{seed}", features=feat, target=(0,) * seq_len)
    context_dim = vocab + seq_len + feat.size
    net = policy.init_policy(vocab, context_dim, (4,), stream(seed, "oracle-init"))
    return net, prompt


def rescaling_minimizer_gap(seed: int) -> float:
    """Worst margin by which a +-1% move off the optimal scalar fails to increase
    the exact-Fisher distance to the natural gradient (positive = strictly optimal)."""
    net, prompt = _tiny_oracle_policy(seed)
    fisher = oracle.exact_fisher(net, [prompt]).matrix
    rec = policy.sample_sequence(net, prompt, stream(seed, "oracle-sample"))
    v = oracle.flatten_layer_mats(rec.seq_grads)
    adv_rng = stream(seed, "oracle-adv")
    advantage = float(adv_rng.uniform(0.2, 1.0) * (1 if adv_rng.random() < 0.5 else -1))
    g = advantage * v
    target, *_ = np.linalg.lstsq(fisher, g, rcond=1e-12)
    v_f_sq = float(v @ fisher @ v)
    lam_star = advantage * float(v @ v) / v_f_sq

    def objective(lam: float) -> float:
        d = lam * v - target
        return float(d @ fisher @ d)

    base = objective(lam_star)
    delta = 0.01 * abs(lam_star)
    return min(objective(lam_star + delta) - base, objective(lam_star - delta) - base)


def npg_directional_trial(seed: int, m: int = 16, c_scale: float = 1.0):
    """One comparison of layer-NTK-preconditioned vs vanilla direction.

    Returns (cosine of preconditioned update to exact NPG, cosine of vanilla
    gradient to exact NPG), or None when the trial is degenerate (all rewards
    equal, so the advantage vector vanishes). The Tikhonov constant follows
    the interacting variant's default policy, c = mean NTK eigenvalue: far
    smaller c amplifies Monte Carlo noise in near-null NTK directions and
    washes out the directional comparison.
    """
    net, prompt = _tiny_oracle_policy(seed)
    target_rng = stream(seed, "npg-target")
    target = tuple(int(t) for t in target_rng.integers(0, net.vocab_size, size=2))
    records = [
        policy.sample_sequence(net, prompt, stream(seed, f"npg-sample/{k}")) for k in range(m)
    ]
    rewards = np.array(
        [np.mean([t == d for t, d in zip(r.tokens, target)]) for r in records]
    )
    if np.ptp(rewards) == 0:
        return None
    advantages = tasks.group_advantages(rewards)

    vanilla = sum(
        a * oracle.flatten_layer_mats(r.seq_grads) for a, r in zip(advantages, records)
    )
    fisher = oracle.exact_fisher(net, [prompt])
    damping = 1e-6 * np.trace(fisher.matrix) / fisher.n_params
    npg = oracle.exact_npg(fisher, vanilla, damping)

    pieces = []
    for l in range(net.n_layers):
        seq_grads = [r.seq_grads[l] for r in records]
        ntk = isopo.build_ntk(seq_grads)
        c = max(c_scale * float(ntk.eig.eigenvalues.mean()), 1e-12)
        pieces.append(isopo.interacting_update(seq_grads, advantages, c, ntk).ravel())
    preconditioned = np.concatenate(pieces)

    def cosine(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    if not np.linalg.norm(vanilla) or not np.linalg.norm(preconditioned):
        return None
    return cosine(preconditioned, npg), cosine(vanilla, npg)


def run_oracle_check(seed: int = 0) -> list[SuiteResult]:
    """Exact-enumeration suites on the tiny oracle policy."""
    results = []
    net, prompt = _tiny_oracle_policy(seed)
    fisher = oracle.exact_fisher(net, [prompt])

    asym = float(np.linalg.norm(fisher.matrix - fisher.matrix.T))
    min_eig = float(np.linalg.eigvalsh(fisher.matrix).min())
    floor = -1e-12 * max(1.0, float(np.linalg.norm(fisher.matrix)))
    results.append(
        SuiteResult("fisher-psd", asym == 0.0 and min_eig >= floor, max(asym, -min_eig))
    )

    probe = stream(seed, "oracle-probe")
    worst = 0.0
    for _ in range(5):
        v = probe.standard_normal(fisher.n_params)
        quad_matrix = float(v @ fisher.matrix @ v)
        quad_enum = oracle.fisher_quadratic(net, [prompt], v)
        worst = max(worst, abs(quad_matrix - quad_enum) / max(quad_enum, 1e-300))
    results.append(SuiteResult("fisher-quadratic-enumeration", worst <= 1e-12, worst))

    g = probe.standard_normal(fisher.n_params)
    damping = 1e-6 * np.trace(fisher.matrix) / fisher.n_params
    v = oracle.exact_npg(fisher, g, damping)
    system = fisher.matrix + damping * np.eye(fisher.n_params)
    residual = float(np.linalg.norm(system @ v - g) / np.linalg.norm(g))
    results.append(SuiteResult("npg-residual", residual <= 1e-9, residual))

    worst_gap = math.inf
    for k in range(5):
        worst_gap = min(worst_gap, rescaling_minimizer_gap(seed + 100 + k))
    results.append(
        SuiteResult("rescaling-minimizer", worst_gap > 0.0, -worst_gap,
                    "positive margin required")
    )

    wins = 0
    trials = 0
    for k in range(20):
        pair = npg_directional_trial(seed + 200 + k)
        if pair is None:
            continue
        trials += 1
        wins += pair[0] > pair[1]
    rate = wins / trials if trials else 0.0
    results.append(
        SuiteResult("npg-directional", rate >= 0.8, 1.0 - rate, f"{wins}/{trials} trials")
    )
    return results
