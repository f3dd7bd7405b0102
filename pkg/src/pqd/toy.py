"""Eight-Gaussian ring used as the desk-scale benchmark distribution."""

import numpy as np

NUM_COMPONENTS = 8
RADIUS = 4.0
STD = 0.3


def mixture_means(k: int = NUM_COMPONENTS, radius: float = RADIUS) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def eight_gaussians(n: int, rng: np.random.Generator, std: float = STD,
                    radius: float = RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points and their component labels (equal weights)."""
    labels = rng.integers(0, NUM_COMPONENTS, n)
    pts = mixture_means(NUM_COMPONENTS, radius)[labels] + std * rng.standard_normal((n, 2))
    return pts, labels
