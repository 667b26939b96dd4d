"""Closed-form posteriors for the toy inference problems."""

import math

import numpy as np
from scipy import stats

from invabc.abcpmc import Prior

# 1-D identity forward under a uniform prior
UNIFORM_LO, UNIFORM_HI, UNIFORM_ZO = -10.0, 10.0, 2.0


def uniform_prior() -> Prior:
    return Prior([UNIFORM_LO], [UNIFORM_HI])


def identity_forward(theta):
    return np.asarray(theta, dtype=np.float64).reshape(len(theta), -1)


def uniform_band_law(zo: float, eps: float):
    """The exact ABC posterior: uniform on ``[zo - eps, zo + eps]`` clipped to the prior box."""
    lo, hi = max(zo - eps, UNIFORM_LO), min(zo + eps, UNIFORM_HI)
    return stats.uniform(loc=lo, scale=hi - lo)


# 2-D Gaussian prior, scalar linear summary a^T theta
GAUSS_MEAN = np.array([0.5, -0.3])
GAUSS_STD = np.array([1.0, 0.8])
GAUSS_BOX = 10.0  # truncation at +-10 prior STDs is negligible
PROJECTION = np.array([1.0, 1.0])
GAUSS_ZO = np.array([1.2])


def gaussian_prior() -> Prior:
    kinds = [("gaussian", float(m), float(s)) for m, s in zip(GAUSS_MEAN, GAUSS_STD)]
    return Prior(GAUSS_MEAN - GAUSS_BOX, GAUSS_MEAN + GAUSS_BOX, kinds)


def projection_forward(theta):
    return (np.asarray(theta) @ PROJECTION)[:, None]


def gaussian_band_posterior(eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and per-dim STD of theta given ``|a^T theta - zo| <= eps``.

    ``s = a^T theta`` is normal, so conditioning on the band makes it a truncated
    normal, and theta given s is Gaussian and linear in s.
    """
    cov = np.diag(GAUSS_STD**2)
    ca = cov @ PROJECTION
    s_var = float(PROJECTION @ ca)
    s_mean = float(PROJECTION @ GAUSS_MEAN)
    s_sd = np.sqrt(s_var)
    z0 = GAUSS_ZO[0]
    lo, hi = (z0 - eps - s_mean) / s_sd, (z0 + eps - s_mean) / s_sd
    band = stats.truncnorm(lo, hi, loc=s_mean, scale=s_sd)
    gain = ca / s_var
    mean = GAUSS_MEAN + gain * (band.mean() - s_mean)
    cov_post = cov - np.outer(ca, ca) / s_var + np.outer(gain, gain) * band.var()
    return mean, np.sqrt(np.diag(cov_post))


# bordered least-squares SVR system


def dense_oracle(anchors, z, gamma, bandwidth):
    """The bordered LSSVR system assembled entry by entry and handed to numpy."""
    n = len(anchors)
    a = np.zeros((n + 1, n + 1))
    for i in range(n):
        a[0, i + 1] = a[i + 1, 0] = 1.0
        for j in range(n):
            d2 = float(np.sum((anchors[i] - anchors[j]) ** 2))
            a[i + 1, j + 1] = math.exp(-d2 / (2 * bandwidth**2)) + (1.0 / gamma if i == j else 0.0)
    sol = np.linalg.solve(a, np.concatenate([[0.0], z]))
    return sol[0], sol[1:], a
