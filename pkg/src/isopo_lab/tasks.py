"""Toy grouped-sampling environments with verifiable rewards.

Two tasks are provided. ``BanditTask`` is a single-step table lookup: each
prompt indexes a fixed reward row and the reward is the chosen arm's entry.
``SeqAdditionTask`` is an autoregressive task: the prompt encodes a pair
(a, b) as two one-hot blocks and the target output is the base-M digit
expansion of (a + b), least significant digit first, over T positions. The
reward is the fraction of correct positions (or exact match, behind a flag).

Both tasks pre-split their prompts into train and heldout sets by a stable
hash so the split never depends on interpreter state.

Advantages are group-relative: each sampled group of G sequences for one
prompt is scored, and every sequence's advantage is its reward minus the
group mean (optionally divided by the group standard deviation).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import policy
from .errors import ContractViolation
from .rng import stream

STD_EPS = 1e-6


@dataclass(frozen=True)
class Prompt:
    id: str
    features: np.ndarray
    target: tuple[int, ...]

    def __hash__(self) -> int:  # features excluded; id is unique per task
        return hash(self.id)


@dataclass
class Group:
    """G sampled sequences for one prompt with rewards and centered advantages."""

    prompt: Prompt
    records: list
    rewards: np.ndarray
    advantages: np.ndarray

    def __post_init__(self) -> None:
        if len(self.records) < 2:
            raise ContractViolation("a group needs at least 2 sequences")
        if not (len(self.records) == len(self.rewards) == len(self.advantages)):
            raise ContractViolation("group fields disagree on group size")


@dataclass
class Microbatch:
    """All groups sampled for one optimization step."""

    groups: list[Group]

    @property
    def records(self) -> list:
        return [r for g in self.groups for r in g.records]

    @property
    def rewards(self) -> np.ndarray:
        return np.concatenate([g.rewards for g in self.groups])

    @property
    def advantages(self) -> np.ndarray:
        return np.concatenate([g.advantages for g in self.groups])

    def prompt_for(self, index: int) -> Prompt:
        for g in self.groups:
            if index < len(g.records):
                return g.prompt
            index -= len(g.records)
        raise IndexError(index)

    @property
    def n_sequences(self) -> int:
        return sum(len(g.records) for g in self.groups)


def group_advantages(rewards, normalize_std: bool = False) -> np.ndarray:
    """Rewards minus the group mean; optionally divided by (std + 1e-6)."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ContractViolation("advantage estimation needs at least 2 rewards")
    adv = r - r.mean()
    if normalize_std:
        adv = adv / (r.std() + STD_EPS)
    return adv


def _heldout_hash(key: str) -> bool:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % 5 == 0  # ~20% heldout


class SeqAdditionTask:
    """Emit the base-M digits of a + b over T autoregressive steps."""

    name = "seqtask"

    def __init__(self, modulus: int = 16, seq_len: int = 3, exact_match_reward: bool = False):
        if modulus < 2 or seq_len < 1:
            raise ContractViolation("need modulus >= 2 and seq_len >= 1")
        self.modulus = modulus
        self.vocab_size = modulus
        self.seq_len = seq_len
        self.feature_dim = 2 * modulus
        self.exact_match_reward = exact_match_reward
        self.train_prompts: list[Prompt] = []
        self.heldout_prompts: list[Prompt] = []
        for a in range(modulus):
            for b in range(modulus):
                prompt = self._make_prompt(a, b)
                if _heldout_hash(f"seq:{a},{b}"):
                    self.heldout_prompts.append(prompt)
                else:
                    self.train_prompts.append(prompt)

    def _make_prompt(self, a: int, b: int) -> Prompt:
        features = np.zeros(self.feature_dim)
        features[a] = 1.0
        features[self.modulus + b] = 1.0
        total = (a + b) % (self.modulus**self.seq_len)
        digits = []
        for _ in range(self.seq_len):
            digits.append(total % self.modulus)
            total //= self.modulus
        return Prompt(id=f"{a}+{b}", features=features, target=tuple(digits))

    def reward(self, prompt: Prompt, tokens) -> float:
        tokens = tuple(tokens)
        if len(tokens) != self.seq_len:
            raise ContractViolation(f"expected {self.seq_len} tokens, got {len(tokens)}")
        correct = sum(1 for t, d in zip(tokens, prompt.target) if t == d)
        if self.exact_match_reward:
            return 1.0 if correct == self.seq_len else 0.0
        return correct / self.seq_len

    def exact_match(self, prompt: Prompt, tokens) -> bool:
        return tuple(tokens) == prompt.target


class BanditTask:
    """Single-step task: reward of arm k for prompt p is a fixed table entry."""

    name = "bandit"
    seq_len = 1

    def __init__(self, n_prompts: int = 8, n_arms: int = 8, table: np.ndarray | None = None):
        if n_prompts < 2 or n_arms < 2:
            raise ContractViolation("need at least 2 prompts and 2 arms")
        self.vocab_size = n_arms
        self.feature_dim = n_prompts
        if table is None:
            # the table is part of the task definition, not of any run's seed
            table = stream(0, "bandit-table").uniform(0.0, 1.0, size=(n_prompts, n_arms))
        table = np.asarray(table, dtype=float)
        if table.shape != (n_prompts, n_arms):
            raise ContractViolation(f"table shape {table.shape} != ({n_prompts}, {n_arms})")
        self.table = table
        self._rows: dict[str, np.ndarray] = {}
        self.train_prompts: list[Prompt] = []
        self.heldout_prompts: list[Prompt] = []
        for i in range(n_prompts):
            features = np.zeros(n_prompts)
            features[i] = 1.0
            prompt = Prompt(id=f"arm{i}", features=features, target=(int(np.argmax(table[i])),))
            self._rows[prompt.id] = table[i]
            # every 4th prompt held out: keeps both splits nonempty for small tables
            if i % 4 == 3:
                self.heldout_prompts.append(prompt)
            else:
                self.train_prompts.append(prompt)

    def reward(self, prompt: Prompt, tokens) -> float:
        tokens = tuple(tokens)
        if len(tokens) != 1:
            raise ContractViolation("bandit sequences have exactly one token")
        return float(self._rows[prompt.id][tokens[0]])

    def exact_match(self, prompt: Prompt, tokens) -> bool:
        return tuple(tokens) == prompt.target


def validation_score(net, task, prompts, n_samples: int | None = None, rng=None) -> float:
    """Mean exact-match rate under greedy decoding.

    Greedy decoding is deterministic, so ``n_samples`` and ``rng`` are
    accepted for interface symmetry but unused.
    """
    del n_samples, rng
    prompts = list(prompts)
    if not prompts:
        raise ContractViolation("validation needs at least one prompt")
    hits = sum(1 for p in prompts if task.exact_match(p, policy.greedy_sequence(net, p)))
    return hits / len(prompts)


def assert_disjoint_split(task) -> None:
    train_ids = {p.id for p in task.train_prompts}
    held_ids = {p.id for p in task.heldout_prompts}
    overlap = train_ids & held_ids
    if overlap:
        raise ContractViolation(f"train/heldout prompts overlap: {sorted(overlap)[:5]}")
    if not train_ids or not held_ids:
        raise ContractViolation("both train and heldout splits must be nonempty")
