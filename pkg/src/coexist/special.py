"""Digamma via upward recurrence and the asymptotic series."""
import numpy as np

# B_{2k} / (2k) for k = 1..8
_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
)
_SHIFT_TO = 10.0


def digamma(x):
    """Psi(x) for x > 0; accepts scalars and arrays."""
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for positive arguments")
    z = arr.copy()
    acc = np.zeros_like(z)
    small = z < _SHIFT_TO
    while np.any(small):
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _SHIFT_TO
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for coef in reversed(_ASYMPTOTIC):
        series = (series + coef) * inv2
    out = np.log(z) - 0.5 / z - series + acc
    return float(out) if np.ndim(x) == 0 else out
