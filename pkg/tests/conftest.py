"""Shared fixtures: determinism guard, small datasets, a pretrained toy codec.

Set LATSEG_TEST_CACHE to a directory to reuse trained artifacts (codec,
reference runs) across local pytest invocations. CI and acceptance runs
should leave it unset so everything is built fresh.
"""

import os
from pathlib import Path

import pytest

from latseg.codec import load_codec, pretrain_toy_codec, save_codec
from latseg.data import synth_dataset
from latseg.seeding import apply_determinism

UNIT_SEED = 714


@pytest.fixture(scope="session", autouse=True)
def deterministic_torch():
    apply_determinism()


def cache_dir() -> Path | None:
    value = os.environ.get("LATSEG_TEST_CACHE")
    if not value:
        return None
    path = Path(value)
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def samples32():
    return synth_dataset(24, seed=UNIT_SEED, resolution=32)


@pytest.fixture(scope="session")
def codec32(samples32):
    cache = cache_dir()
    path = cache / "codec32.lscp" if cache else None
    if path and path.exists():
        return load_codec(path)
    codec = pretrain_toy_codec(samples32, seed=UNIT_SEED, steps=500)
    if path:
        save_codec(codec, path)
    return codec
