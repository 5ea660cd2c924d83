"""Adaptive-quadrature reference values for Gaussian divergences (test oracle)."""

import numpy as np
from scipy import integrate
from scipy.stats import multivariate_normal, norm


def _box(means, covs, width=9.0):
    lo = min(m - width * np.sqrt(np.diag(c)).max() for m, c in zip(means, covs))
    hi = max(m + width * np.sqrt(np.diag(c)).max() for m, c in zip(means, covs))
    return np.min(lo), np.max(hi)


def bhattacharyya_1d(m1, v1, m2, v2):
    lo, hi = _box([np.atleast_1d(m1), np.atleast_1d(m2)], [np.atleast_2d(v1), np.atleast_2d(v2)])
    f = lambda x: np.exp(0.5 * (norm.logpdf(x, m1, np.sqrt(v1)) + norm.logpdf(x, m2, np.sqrt(v2))))
    val, _ = integrate.quad(f, lo, hi, epsabs=1e-13, epsrel=1e-11, limit=200, points=[m1, m2])
    return -np.log(val)


def kl_1d(m1, v1, m2, v2):
    lo, hi = _box([np.atleast_1d(m1)], [np.atleast_2d(v1)])

    def f(x):
        lp = norm.logpdf(x, m1, np.sqrt(v1))
        return np.exp(lp) * (lp - norm.logpdf(x, m2, np.sqrt(v2)))

    val, _ = integrate.quad(f, lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200, points=[m1])
    return val


def _cube(f, box):
    lo, hi = np.array(box, dtype=float).T
    res = integrate.cubature(f, lo, hi, rtol=1e-9, atol=1e-11)
    if res.status != "converged":
        raise RuntimeError(f"cubature did not converge (error {res.error})")
    return float(res.estimate)


def _axis_box(means, covs):
    return [_box([m[i:i + 1] for m in means], [c[i:i + 1, i:i + 1] for c in covs]) for i in range(2)]


def bhattacharyya_2d(m1, c1, m2, c2):
    p, q = multivariate_normal(m1, c1), multivariate_normal(m2, c2)
    f = lambda x: np.exp(0.5 * (p.logpdf(x) + q.logpdf(x)))
    return -np.log(_cube(f, _axis_box([m1, m2], [c1, c2])))


def kl_2d(m1, c1, m2, c2):
    p, q = multivariate_normal(m1, c1), multivariate_normal(m2, c2)

    def f(x):
        lp = p.logpdf(x)
        return np.exp(lp) * (lp - q.logpdf(x))

    return _cube(f, _axis_box([m1], [c1]))
