from __future__ import annotations

import math

import numpy as np
import pytest

from isopo_lab import baselines, checks, isopo, oracle, policy, tasks
from isopo_lab.errors import ContractViolation, EstimatorDegenerateError
from isopo_lab.rng import stream

from conftest import make_microbatch


def random_factors(rng, n, out_dim, in_dim):
    act = rng.standard_normal((n, in_dim + 1))
    act[:, -1] = 1.0
    gout = rng.standard_normal((n, out_dim))
    return policy.PositionGradFactors(act, gout)


def scale_grad_out(record, s):
    """Scale every position's backpropagated factor; keeps the rank-one structure."""
    factors = [
        policy.PositionGradFactors(f.act_in.copy(), f.grad_out * s) for f in record.factors
    ]
    grads = [f.grad_out.T @ f.act_in for f in factors]
    return policy.SequenceRecord(record.prompt_id, record.tokens, record.logprob, factors, grads)


# ---------------------------------------------------------------- fisher norm


def test_fisher_norm_orthogonal_update_is_zero():
    rng = np.random.default_rng(0)
    factors = random_factors(rng, 1, 3, 4)
    g, a = factors.grad_out[0], factors.act_in[0]
    # build v orthogonal (Frobenius) to the single rank-one sample
    v = rng.standard_normal((3, 5))
    sample = np.outer(g, a)
    v -= sample * (np.sum(v * sample) / np.sum(sample * sample))
    assert isopo.fisher_norm_estimate(v, factors) < 1e-12 * np.linalg.norm(v)


def test_fisher_norm_single_sample_own_outer_product():
    rng = np.random.default_rng(1)
    factors = random_factors(rng, 1, 4, 6)
    g, a = factors.grad_out[0], factors.act_in[0]
    v = np.outer(g, a)
    # numerator |g|^2 |a|^2, denominator |g||a|, so the estimate is |g||a| = |v|_F
    expected = np.linalg.norm(g) * np.linalg.norm(a)
    got = isopo.fisher_norm_estimate(v, factors)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(np.linalg.norm(v), rel=1e-12)


def test_fisher_norm_matches_materialized_oracle(microbatch):
    samples = isopo.draw_overlap_samples(microbatch, 10, stream(0, "ov"))
    rng = np.random.default_rng(2)
    n_layers = len(microbatch.records[0].factors)
    for l in range(n_layers):
        mats = []
        for rec in microbatch.records:
            mats.extend(oracle.materialize_position_grads(rec, l))
        sampled = [mats[i] for i in samples.indices]
        for _ in range(20):
            v = rng.standard_normal(microbatch.records[0].seq_grads[l].shape)
            fast = isopo.fisher_norm_estimate(v, samples.layers[l], samples.denominators[l])
            slow = oracle.naive_fisher_norm(v, sampled)
            assert fast == pytest.approx(slow, rel=1e-10)


def test_fisher_norm_degenerate_samples_raise():
    factors = policy.PositionGradFactors(
        np.concatenate([np.zeros((2, 3)), np.ones((2, 1))], axis=1), np.zeros((2, 4))
    )
    with pytest.raises(EstimatorDegenerateError):
        isopo.fisher_norm_estimate(np.ones((4, 4)), factors)


def test_fisher_norm_shape_mismatch():
    rng = np.random.default_rng(3)
    factors = random_factors(rng, 2, 3, 4)
    with pytest.raises(ContractViolation):
        isopo.fisher_norm_estimate(np.zeros((3, 4)), factors)  # needs in_dim + 1 = 5


# ----------------------------------------------------------------- rescaling


def test_rescaling_zero_exponents_identity():
    rng = np.random.default_rng(4)
    grad = rng.standard_normal((3, 5))
    params = isopo.RescalingParams(p=0.0, q=0.0, r=0.0)
    assert np.array_equal(isopo.rescaling(grad, 0.7, params), grad)


def test_rescaling_fisher_normalization_formula():
    rng = np.random.default_rng(5)
    grad = rng.standard_normal((4, 4))
    params = isopo.RescalingParams(p=-1.0, q=0.0, r=0.0, reg_strength=0.0)
    f = 2.5
    expected = grad / math.sqrt(f * f + isopo.RESCALE_FLOOR)
    assert np.allclose(isopo.rescaling(grad, f, params), expected, rtol=1e-14)


def test_rescaling_direction_matching_formula():
    rng = np.random.default_rng(6)
    grad = rng.standard_normal((4, 6))
    params = isopo.RescalingParams(p=0.0, q=0.0, r=-2.0, reg_strength=0.0)
    f = 3.0
    gn = float(np.linalg.norm(grad))
    rel = f / gn
    exact = grad / (rel * rel + isopo.RESCALE_FLOOR)
    got = isopo.rescaling(grad, f, params)
    assert np.allclose(got, exact, rtol=1e-14)
    # with the floor negligible this is grad * |grad|^2 / F^2
    assert np.allclose(got, grad * gn * gn / (f * f), rtol=1e-6)


def test_rescaling_total_for_zero_inputs():
    params = isopo.RescalingParams(p=-1.0, q=1.0, r=-2.0)
    out = isopo.rescaling(np.zeros((2, 2)), 0.0, params)
    assert np.all(np.isfinite(out))


def test_rescaling_rejects_negative_norm():
    with pytest.raises(ContractViolation):
        isopo.rescaling(np.zeros((2, 2)), -1.0, isopo.RescalingParams())


# ------------------------------------------------------------ overlap samples


def test_overlap_clamps_to_all_positions(microbatch):
    total = sum(len(r.factors[0]) for r in microbatch.records)
    samples = isopo.draw_overlap_samples(microbatch, 10_000, stream(0, "c"))
    assert samples.n_samples == total
    assert np.array_equal(np.sort(samples.indices), np.arange(total))


def test_overlap_deterministic(microbatch):
    a = isopo.draw_overlap_samples(microbatch, 5, stream(3, "ov"))
    b = isopo.draw_overlap_samples(microbatch, 5, stream(3, "ov"))
    assert np.array_equal(a.indices, b.indices)
    assert a.denominators == b.denominators


def test_overlap_inclusion_uniform(microbatch):
    total = sum(len(r.factors[0]) for r in microbatch.records)
    take = 6
    redraws = 10_000
    counts = np.zeros(total)
    rng = stream(0, "uniformity")
    for _ in range(redraws):
        idx = isopo.draw_overlap_samples(microbatch, take, rng).indices
        counts[idx] += 1
    p = take / total
    sigma = math.sqrt(p * (1 - p) / redraws)
    assert np.all(np.abs(counts / redraws - p) < 3 * sigma)


def test_overlap_caches_denominator(microbatch):
    samples = isopo.draw_overlap_samples(microbatch, 7, stream(1, "den"))
    for l, factors in enumerate(samples.layers):
        scale = np.linalg.norm(factors.grad_out, axis=1) * np.linalg.norm(
            factors.act_in, axis=1
        )
        assert samples.denominators[l] == pytest.approx(float(np.linalg.norm(scale)))
        assert samples.denominators[l] > 0


# --------------------------------------------------- non-interacting update


def test_noninteracting_zero_advantages(small_net, small_task):
    mb = make_microbatch(small_net, small_task, seed=1, force_advantages=False)
    for g in mb.groups:
        g.advantages = np.zeros_like(g.advantages)
    samples = isopo.draw_overlap_samples(mb, 16, stream(0, "o"))
    upd = isopo.noninteracting_update(mb, samples, isopo.RescalingParams(p=-1.0))
    for g in upd.layer_grads:
        assert np.all(g == 0.0)


def test_noninteracting_identity_equals_reinforce(microbatch):
    samples = isopo.draw_overlap_samples(microbatch, 16, stream(0, "o"))
    params = isopo.RescalingParams(p=0.0, q=0.0, r=0.0)
    upd = isopo.noninteracting_update(microbatch, samples, params)
    ref = baselines.reinforce_grad(microbatch)
    for a, b in zip(upd.layer_grads, ref):
        assert np.max(np.abs(a - b)) <= 1e-12 * max(np.max(np.abs(b)), 1.0)


def test_noninteracting_single_sequence_composition(small_net, small_task):
    prompt = small_task.train_prompts[2]
    records = [
        policy.sample_sequence(small_net, prompt, stream(9, f"c/{k}")) for k in range(2)
    ]
    adv = np.array([1.7, 0.0])
    mb = tasks.Microbatch([tasks.Group(prompt, records, np.zeros(2), adv)])
    samples = isopo.draw_overlap_samples(mb, 8, stream(2, "o"))
    params = isopo.RescalingParams(p=-1.0, q=0.0, r=0.0, reg_strength=0.0)
    upd = isopo.noninteracting_update(mb, samples, params)
    # compose the two operations by hand for the only active sequence
    for l in range(small_net.n_layers):
        v = records[0].seq_grads[l]
        f = isopo.fisher_norm_estimate(v, samples.layers[l], samples.denominators[l])
        expected = adv[0] * isopo.rescaling(v, f, isopo.RescalingParams(p=-1.0), l)
        assert np.allclose(upd.layer_grads[l], expected, rtol=1e-12, atol=1e-15)


def test_noninteracting_linear_in_advantages(small_net, small_task):
    mb = make_microbatch(small_net, small_task, seed=4)
    samples = isopo.draw_overlap_samples(mb, 12, stream(4, "o"))
    params = isopo.RescalingParams(p=-1.0, q=0.5, r=0.25)
    rng = np.random.default_rng(8)
    adv1 = [rng.standard_normal(len(g.records)) for g in mb.groups]
    adv2 = [rng.standard_normal(len(g.records)) for g in mb.groups]

    def update_with(advs):
        for g, a in zip(mb.groups, advs):
            g.advantages = a
        return isopo.noninteracting_update(mb, samples, params).layer_grads

    u1 = update_with(adv1)
    u2 = update_with(adv2)
    u_sum = update_with([a + b for a, b in zip(adv1, adv2)])
    u_scaled = update_with([2.5 * a for a in adv1])
    for a, b, s in zip(u1, u2, u_sum):
        assert np.allclose(a + b, s, atol=1e-12)
    for a, s in zip(u1, u_scaled):
        assert np.allclose(2.5 * a, s, atol=1e-12)


def test_noninteracting_degenerate_fallback(small_net, small_task):
    mb = make_microbatch(small_net, small_task, seed=5, n_groups=1, group_size=3)
    # zero out one sequence's gradients entirely
    rec = mb.groups[0].records[1]
    for l in range(len(rec.seq_grads)):
        rec.seq_grads[l][:] = 0.0
        rec.factors[l].grad_out[:] = 0.0
    samples = isopo.draw_overlap_samples(mb, 6, stream(5, "o"))
    upd = isopo.noninteracting_update(mb, samples, isopo.RescalingParams(p=-1.0))
    assert upd.degenerate_sequences == 1
    assert np.all(np.isnan(upd.fisher_norms[1]))
    assert np.all(np.isfinite([np.max(np.abs(g)) for g in upd.layer_grads]))


def test_self_normalization_under_shared_samples(small_net, small_task):
    # grad_out scaled so every Fisher-norm estimate clears the 1e-8 floor
    prompt = small_task.train_prompts[0]
    records = [
        scale_grad_out(policy.sample_sequence(small_net, prompt, stream(0, f"p/{k}")), 12.0)
        for k in range(8)
    ]
    mb = tasks.Microbatch(
        [tasks.Group(prompt, records, np.zeros(8), np.linspace(-1, 1, 8))]
    )
    samples = isopo.draw_overlap_samples(mb, 64, stream(0, "ov"))
    norms, degenerate = isopo.sequence_fisher_norms(mb, samples)
    assert not degenerate.any()
    assert np.nanmin(norms) > 2.3  # floor contributes < 1e-9 beyond this scale
    params = isopo.RescalingParams(p=-1.0, q=0.0, r=0.0, reg_strength=0.0)
    for i, rec in enumerate(records):
        for l in range(small_net.n_layers):
            w = isopo.rescaling(rec.seq_grads[l], norms[i, l], params, l)
            f_w = isopo.fisher_norm_estimate(w, samples.layers[l], samples.denominators[l])
            assert abs(f_w - 1.0) <= 1e-9


def test_self_normalization_floor_identity(microbatch):
    # at native scale the composition equals F / sqrt(F^2 + floor) exactly
    samples = isopo.draw_overlap_samples(microbatch, 16, stream(0, "o"))
    norms, _ = isopo.sequence_fisher_norms(microbatch, samples)
    params = isopo.RescalingParams(p=-1.0, q=0.0, r=0.0, reg_strength=0.0)
    for i, rec in enumerate(microbatch.records):
        for l in range(len(rec.seq_grads)):
            if np.isnan(norms[i, l]):
                continue
            w = isopo.rescaling(rec.seq_grads[l], norms[i, l], params, l)
            f_w = isopo.fisher_norm_estimate(w, samples.layers[l], samples.denominators[l])
            f = norms[i, l]
            assert f_w == pytest.approx(f / math.sqrt(f * f + isopo.RESCALE_FLOOR), rel=1e-12)


def test_estimator_consistent_with_exact_fisher():
    # sequence-level exact moments vs the position-subsampled estimate
    seed = 0
    net, prompt = checks._tiny_oracle_policy(seed)
    v_record = policy.sample_sequence(net, prompt, stream(seed, "v"))
    for l in range(net.n_layers):
        fisher_l, mean_sq = oracle.layer_moments(net, [prompt], l)
        v = v_record.seq_grads[l]
        oracle_val = float(v.ravel() @ fisher_l @ v.ravel()) / mean_sq
        estimates = []
        for redraw in range(20):
            recs = [
                policy.sample_sequence(net, prompt, stream(1000 + redraw, f"r/{k}"))
                for k in range(256)
            ]
            mb = tasks.Microbatch(
                [tasks.Group(prompt, recs, np.zeros(256), np.zeros(256))]
            )
            ov = isopo.draw_overlap_samples(mb, 512, stream(redraw, "ov"))
            estimates.append(
                isopo.fisher_norm_estimate(v, ov.layers[l], ov.denominators[l]) ** 2
            )
        mean_est = float(np.mean(estimates))
        assert mean_est == pytest.approx(oracle_val, rel=0.25)


# ------------------------------------------------------------------ NTK side


def test_build_ntk_orthonormal_grads():
    grads = [np.zeros((2, 3)) for _ in range(3)]
    grads[0][0, 0] = 1.0
    grads[1][0, 1] = 1.0
    grads[2][1, 2] = 1.0
    ntk = isopo.build_ntk(grads)
    assert np.array_equal(ntk.gram, np.eye(3))


def test_build_ntk_duplicated_gradient():
    rng = np.random.default_rng(10)
    g = rng.standard_normal((3, 4))
    sq = float(np.sum(g * g))
    ntk = isopo.build_ntk([g, g])
    assert np.allclose(ntk.gram, sq * np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.allclose(sorted(ntk.eig.eigenvalues), [0.0, 2.0 * sq], atol=1e-12 * sq)


def test_build_ntk_matches_frobenius_dot(microbatch):
    seq_grads = [r.seq_grads[0] for r in microbatch.records]
    ntk = isopo.build_ntk(seq_grads)
    m = len(seq_grads)
    for i in range(m):
        for j in range(m):
            assert ntk.gram[i, j] == isopo.frobenius_dot(seq_grads[i], seq_grads[j])


def test_interacting_single_sequence():
    rng = np.random.default_rng(11)
    g = rng.standard_normal((2, 5))
    sq = float(np.sum(g * g))
    a1, c = 0.8, 0.3
    upd = isopo.interacting_update([g], np.array([a1]), c)
    assert np.allclose(upd, a1 / (sq + c) * g, rtol=1e-12)


def test_interacting_orthonormal_grads_diagonal():
    grads = [np.zeros((2, 2)) for _ in range(4)]
    for i, (r, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        grads[i][r, c] = 1.0
    adv = np.array([1.0, -2.0, 0.5, 3.0])
    c = 0.7
    upd = isopo.interacting_update(grads, adv, c)
    expected = sum(a / (1.0 + c) * g for a, g in zip(adv, grads))
    assert np.allclose(upd, expected, rtol=1e-12)


def test_interacting_matches_flattened_dense_oracle(microbatch):
    adv = microbatch.advantages
    for l in range(len(microbatch.records[0].seq_grads)):
        seq_grads = [r.seq_grads[l] for r in microbatch.records]
        jac = np.stack([g.ravel() for g in seq_grads])
        c = 0.05 * float(np.trace(jac @ jac.T)) / len(seq_grads) + 1e-9
        upd = isopo.interacting_update(seq_grads, adv, c)
        dense = jac.T @ np.linalg.solve(jac @ jac.T + c * np.eye(len(seq_grads)), adv)
        assert np.linalg.norm(upd.ravel() - dense) <= 1e-9 * np.linalg.norm(dense)


def test_interacting_large_c_approaches_vanilla(microbatch):
    adv = microbatch.advantages
    seq_grads = [r.seq_grads[0] for r in microbatch.records]
    vanilla = sum(a * g for a, g in zip(adv, seq_grads)).ravel()
    k_norm = float(np.linalg.norm(isopo.build_ntk(seq_grads).gram))
    upd = isopo.interacting_update(seq_grads, adv, 1e6 * k_norm).ravel()
    cos = upd @ vanilla / (np.linalg.norm(upd) * np.linalg.norm(vanilla))
    assert math.acos(min(cos, 1.0)) < 1e-3


# ----------------------------------------------------------------------- EMA


def test_ema_first_update_adopts_value():
    state = isopo.RegEmaState(decay=0.9)
    assert isopo.ema_update(state, "k", 5.0) == 5.0


def test_ema_blend():
    state = isopo.RegEmaState(decay=0.9)
    isopo.ema_update(state, "k", 1.0)
    assert isopo.ema_update(state, "k", 2.0) == pytest.approx(1.1)


def test_ema_fixed_point():
    state = isopo.RegEmaState(decay=0.9)
    isopo.ema_update(state, "k", 0.0)
    for _ in range(200):
        isopo.ema_update(state, "k", 3.0)
    assert abs(state.value("k") - 3.0) < 1e-6


def test_ema_invalid_decay():
    with pytest.raises(ContractViolation):
        isopo.RegEmaState(decay=1.0)


def test_reg_strength_uses_ema():
    state = isopo.RegEmaState(decay=0.9)
    params = isopo.RescalingParams(p=-1.0, q=0.0, r=0.0, reg_strength=2.0, ema=state)
    isopo.ema_update(state, (0, "fisher_sq"), 4.0)
    grad = np.ones((2, 2))
    f = 1.0
    expected_scale = 1.0 / math.sqrt(f * f + 2.0 * 4.0 + isopo.RESCALE_FLOOR)
    assert np.allclose(isopo.rescaling(grad, f, params, layer=0), expected_scale * grad)


def test_exclude_own_positions_changes_estimate(small_net, small_task):
    mb = make_microbatch(small_net, small_task, seed=6)
    samples = isopo.draw_overlap_samples(mb, 1_000, stream(6, "o"))  # full set
    incl, _ = isopo.sequence_fisher_norms(mb, samples, exclude_own=False)
    excl, _ = isopo.sequence_fisher_norms(mb, samples, exclude_own=True)
    # excluding a sequence's own positions must change (typically lower) its estimate
    assert np.nanmax(np.abs(incl - excl)) > 0
