"""Small builders shared by the test modules."""
import numpy as np


def make_block(n: int, positive_positions, block: str = "b"):
    """One block whose scores put positives at the given 1-based positions."""
    labels = np.zeros(n, dtype=np.int8)
    labels[np.asarray(positive_positions) - 1] = 1
    scores = -np.arange(n, dtype=np.float64)
    return labels, scores
