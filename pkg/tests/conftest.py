from __future__ import annotations

import numpy as np
import pytest

from isopo_lab import policy, tasks
from isopo_lab.rng import stream


@pytest.fixture
def small_task():
    return tasks.SeqAdditionTask(modulus=5, seq_len=2)


@pytest.fixture
def small_net(small_task):
    ctx = small_task.vocab_size + small_task.seq_len + small_task.feature_dim
    return policy.init_policy(small_task.vocab_size, ctx, (6,), stream(0, "test-init"))


def make_microbatch(net, task, seed=0, n_groups=2, group_size=4, force_advantages=True):
    """Sampled microbatch; nudges advantages away from all-zero when asked."""
    groups = []
    for gi in range(n_groups):
        prompt = task.train_prompts[(seed + 5 * gi) % len(task.train_prompts)]
        records = [
            policy.sample_sequence(net, prompt, stream(seed, f"mb/{gi}/{k}"))
            for k in range(group_size)
        ]
        rewards = np.array([task.reward(prompt, r.tokens) for r in records])
        advantages = tasks.group_advantages(rewards)
        if force_advantages and not np.any(advantages):
            advantages = np.linspace(-1.0, 1.0, group_size)
            advantages -= advantages.mean()
        groups.append(tasks.Group(prompt, records, rewards, advantages))
    return tasks.Microbatch(groups)


@pytest.fixture
def microbatch(small_net, small_task):
    return make_microbatch(small_net, small_task, seed=0)
