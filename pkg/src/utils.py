"""
This module provides small helpers shared across the package: seeded random-stream
derivation and directory handling.
"""

import logging
import os
from typing import List, Union

import numpy as np

_logger: logging.Logger = logging.getLogger("Wombet")

SeedLike = Union[int, np.random.Generator]


def spawn_seeds(seed: int, count: int) -> List[int]:
    """
    Derive `count` independent integer seeds from one root seed.

    Args:
        seed (int): Root seed.
        count (int): Number of child seeds.

    Returns:
        List[int]: Child seeds, stable for a given (seed, count) prefix.
    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Accept either an integer seed or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def ensure_directory(path: str) -> str:
    """
    Create `path` (and parents) if it does not exist.

    Args:
        path (str): Directory path.

    Returns:
        str: The same path.
    """
    try:
        if path and not os.path.exists(path):
            os.makedirs(path)
            _logger.debug("Created directory %s", path)
    except OSError as e:
        _logger.critical("Failed to create directory '%s': %s", path, e)
        raise
    return path
