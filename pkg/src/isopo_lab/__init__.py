"""Desk-scale laboratory for Fisher-metric policy-gradient rescaling.

The package trains tiny autoregressive softmax policies on verifiable toy
tasks with four algorithms sharing one sampling path: REINFORCE, clipped
GRPO, per-sequence Fisher-norm rescaling (non-interacting ISOPO), and the
layer-wise NTK-preconditioned microbatch update (interacting ISOPO). Policies
are small enough that the exact Fisher matrix can be enumerated, so every
stochastic estimator here is testable against ground truth.
"""

from .config import RunConfig, load_config, parse_config, serialize_config
from .harness import compare, train

__all__ = [
    "RunConfig",
    "load_config",
    "parse_config",
    "serialize_config",
    "train",
    "compare",
]
