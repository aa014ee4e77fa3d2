"""Deterministic seed derivation and process-level determinism switches.

Every stochastic component draws from its own named stream derived from the
master seed, so constructing or skipping one component (e.g. the alignment
head) never shifts the draws seen by another.
"""

import hashlib

import numpy as np
import torch


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit seed for the stream `label` under `master`."""
    digest = hashlib.blake2b(f"{master}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def torch_generator(master: int, label: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master, label))
    return gen


def numpy_generator(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))


def seed_module_init(master: int, label: str) -> None:
    """Scope torch's global RNG right before constructing one module.

    nn.Module constructors draw from the global RNG; re-seeding per component
    keeps each component's initialization independent of what else gets built.
    """
    torch.manual_seed(derive_seed(master, label))


def apply_determinism(enabled: bool = True) -> None:
    """Single-threaded deterministic mode; bitwise reproducibility target."""
    if not enabled:
        return
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
