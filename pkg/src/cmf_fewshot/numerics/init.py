"""Parameter initialisers."""
import numpy as np


def kaiming_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """He-uniform for ReLU nets: U(-b, b) with b = sqrt(6 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
