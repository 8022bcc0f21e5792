# Licensed under the MIT License.
import functools
import logging
from collections.abc import Callable
from typing import ParamSpec, TypeVar

import numpy as np
import stackprinter
import torch

logger = logging.getLogger(__name__)

REAL_DTYPE = torch.float64
COMPLEX_DTYPE = torch.complex128


def child_seed(parent_seed: int, *spawn_key: int) -> int:
    """Derive a 64-bit child seed from a parent seed and an index path.

    The scheme is `SeedSequence(entropy=parent_seed, spawn_key=spawn_key)`, so the seed of
    scene `i` does not depend on how many scenes were drawn before it or in which order.
    """
    seq = np.random.SeedSequence(entropy=parent_seed, spawn_key=tuple(int(k) for k in spawn_key))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def make_generator(seed: int, *spawn_key: int) -> torch.Generator:
    """CPU torch generator seeded with `child_seed(seed, *spawn_key)` (or `seed` if no key)."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(child_seed(seed, *spawn_key) if spawn_key else int(seed))
    return gen


def format_epoch_checkpoint_filename(epoch: int) -> str:
    """Format the filename for the checkpoint written after `epoch`."""
    return f"checkpoint_{epoch:05d}.yaml"


P = ParamSpec("P")
T = TypeVar("T")


def print_traceback_on_exception(func: Callable[P, T]) -> Callable[P, T]:
    """Wraps a function with stackprinter error logging."""

    @functools.wraps(func)
    def with_stackprint(*args: P.args, **kwargs: P.kwargs) -> T:
        try:
            return func(*args, **kwargs)
        except:
            stackprinter.show()
            raise

    return with_stackprint
