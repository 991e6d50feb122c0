import os
import random
from typing import Optional

import numpy as np

from forelem.config import DEFAULT_SEED

SEED = DEFAULT_SEED


def resolve_seed(seed: Optional[int] = None) -> int:
    """The explicit seed, else ``FORELEM_SEED`` from the environment, else ``SEED``."""
    if seed is not None:
        return seed
    env = os.environ.get("FORELEM_SEED")
    if env is None or not env.strip():
        return SEED
    try:
        return int(env)
    except ValueError as e:
        raise ValueError(f"FORELEM_SEED must be an integer, got {env!r}") from e


def set_random_seeds(seed: Optional[int] = None) -> int:
    seed = resolve_seed(seed)
    random.seed(seed)
    np.random.seed(seed)
    return seed
