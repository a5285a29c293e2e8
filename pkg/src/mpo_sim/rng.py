"""Counter-based random streams keyed by (master seed, trajectory index)."""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


def trajectory_generator(seed: int, traj: int) -> np.random.Generator:
    """Philox generator whose 128-bit key is ``(seed, traj)``; streams never overlap."""
    if seed < 0 or traj < 0:
        raise ValueError(f"seed and trajectory index must be non-negative, got {seed}, {traj}")
    key = np.array([seed & _MASK64, traj & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def step_uniforms(seed: int, traj: int, n_steps: int, width: int) -> np.ndarray:
    """Uniforms in ``[0, 1)`` with row ``s`` reserved for step ``s`` of trajectory ``traj``."""
    return trajectory_generator(seed, traj).random((n_steps, width))


def normal_from_uniform(u: np.ndarray) -> np.ndarray:
    """Standard normals by inverse CDF; ``u = 0`` is nudged to keep the result finite."""
    return ndtri(np.where(u == 0.0, 2.0**-54, u))
