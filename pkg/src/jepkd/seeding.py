"""Deterministic seed-stream fan-out.

One master seed feeds every named stream so that changing, say, the noise
stream cannot perturb corpus generation. Streams further key on integers
(epoch, split, sample index) so resumed runs reconstruct identical state.
"""

from __future__ import annotations

import numpy as np

CORPUS = 1
INIT = 2
NOISE = 3
SHUFFLE = 4
TEACHER = 5
EVAL_NOISE = 6


def stream_rng(master_seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(stream), *map(int, extra)]))


def derive_teacher_seed(master_seed: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), TEACHER]).generate_state(1)[0])
