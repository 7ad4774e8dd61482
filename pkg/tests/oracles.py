"""Independent reference computations used by the tests.

Nothing here imports the package's numerical code paths.
"""

import math

import numpy as np


def mann_whitney_auc(scores, anomalous) -> float:
    """Fraction of (anomalous, normal) pairs ordered correctly; ties count 1/2."""
    pos = [s for s, a in zip(scores, anomalous) if a]
    neg = [s for s, a in zip(scores, anomalous) if not a]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def adam_first_step(param, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = (1 - beta1) * grad
    v = (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1)
    v_hat = v / (1 - beta2)
    return param - lr * m_hat / (math.sqrt(v_hat) + eps)


def central_difference(f, arr: np.ndarray, index, step: float = 1e-3) -> float:
    old = arr[index]
    arr[index] = old + step
    up = f()
    arr[index] = old - step
    down = f()
    arr[index] = old
    return (up - down) / (2 * step)


def relative_error(a, b, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||, floor); the floor covers gradients that vanish
    identically (e.g. a bias feeding straight into batch norm)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_gradient(f, arr: np.ndarray, analytic: np.ndarray, rng, samples: int = 12, step: float = 1e-3) -> float:
    """Relative error between ``analytic`` and central differences at sampled coordinates."""
    flat = arr.reshape(-1)
    idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
    numeric = [central_difference(f, flat, int(i), step) for i in idx]
    return relative_error(analytic.reshape(-1)[idx], numeric)
