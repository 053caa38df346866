"""Deterministic seed fan-out from one master seed.

A stream is identified by a stage name plus integer indices.  The child seed is
``SeedSequence(master, spawn_key=(crc32(stage), *indices))`` reduced to 64 bits,
so any sample can be regenerated alone, in any order, on any worker.
"""
from __future__ import annotations

import zlib

import numpy as np


def stage_code(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


def derive_seed(master: int, stage: str, *indices: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=(stage_code(stage),) + tuple(int(i) for i in indices))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(master: int, stage: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, *indices))
