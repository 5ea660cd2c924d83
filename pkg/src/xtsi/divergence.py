"""Closed-form Bhattacharyya distance, KL divergence and entropy of pixel-product Gaussians.

An object's data is a product of independent per-pixel Gaussians, so every
quantity here is a sum of per-pixel terms. The API only ever accepts
per-pixel blocks, which keeps the independence assumption explicit. All
log-determinants come from Cholesky factors; raw determinants overflow at
realistic photon counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AlignmentError, DecompositionError

LN2 = np.log(2.0)
LN_2PI_E = np.log(2.0 * np.pi * np.e)


@dataclass(frozen=True, eq=False)
class ObjectDistribution:
    """Per-pixel means ``(N, M)`` and covariances ``(N, M, M)`` of one object."""

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        covs = np.array(self.covs, dtype=float)
        if means.ndim == 1:
            means = means[None, :]
        if covs.ndim == 2:
            covs = covs[None, :, :]
        n, m = means.shape
        if covs.shape != (n, m, m):
            raise AlignmentError(f"covariances of shape {covs.shape} do not match means {means.shape}")
        means.flags.writeable = False
        covs.flags.writeable = False
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @classmethod
    def from_pixels(cls, pixels: Sequence) -> "ObjectDistribution":
        """Build from objects exposing ``mean`` and ``cov`` (e.g. PixelDistribution)."""
        if not pixels:
            raise AlignmentError("an object needs at least one pixel")
        sizes = {np.size(p.mean) for p in pixels}
        if len(sizes) != 1:
            raise AlignmentError(f"pixels disagree on bin count: {sorted(sizes)}")
        return cls(np.stack([p.mean for p in pixels]), np.stack([p.cov for p in pixels]))

    @property
    def n_pixels(self) -> int:
        return self.means.shape[0]

    @property
    def n_bins(self) -> int:
        return self.means.shape[1]

    def concat(self, other: "ObjectDistribution") -> "ObjectDistribution":
        return ObjectDistribution(np.concatenate([self.means, other.means]),
                                  np.concatenate([self.covs, other.covs]))


def _cholesky(covs: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        flat = covs.reshape(-1, *covs.shape[-2:])
        for idx in range(flat.shape[0]):
            try:
                np.linalg.cholesky(flat[idx])
            except np.linalg.LinAlgError:
                where = np.unravel_index(idx, covs.shape[:-2])
                raise DecompositionError(
                    f"{what}: covariance at index {tuple(int(i) for i in where)} is not positive definite"
                ) from None
        raise


def _logdet(chol: np.ndarray) -> np.ndarray:
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)


def _check_pair(p: ObjectDistribution, q: ObjectDistribution):
    if p.means.shape != q.means.shape:
        raise AlignmentError(f"objects differ in shape: {p.means.shape} vs {q.means.shape}")


def _mahalanobis_sq(chol: np.ndarray, delta: np.ndarray) -> np.ndarray:
    z = np.linalg.solve(chol, delta[..., None])[..., 0]
    return np.sum(z * z, axis=-1)


def bhattacharyya(p: ObjectDistribution, q: ObjectDistribution) -> float:
    """Bhattacharyya distance, summed over independent pixels."""
    _check_pair(p, q)
    m = p.n_bins
    ld_p = _logdet(_cholesky(p.covs, "first object"))
    ld_q = _logdet(_cholesky(q.covs, "second object"))
    chol_s = _cholesky(p.covs + q.covs, "summed covariance")
    quad = _mahalanobis_sq(chol_s, p.means - q.means)
    terms = quad / 4.0 - (ld_p + ld_q) / 4.0 + _logdet(chol_s) / 2.0 - m * LN2 / 2.0
    return float(np.sum(terms))


def kl(p: ObjectDistribution, q: ObjectDistribution) -> float:
    """KL divergence ``KL(p || q)``, summed over independent pixels."""
    _check_pair(p, q)
    m = p.n_bins
    chol_p = _cholesky(p.covs, "first object")
    chol_q = _cholesky(q.covs, "second object")
    quad = _mahalanobis_sq(chol_q, p.means - q.means)
    # tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    trace = np.sum(np.linalg.solve(chol_q, chol_p) ** 2, axis=(-2, -1))
    terms = quad - _logdet(chol_p) + _logdet(chol_q) + trace - m
    return float(0.5 * np.sum(terms))


def gaussian_entropy(p: ObjectDistribution) -> float:
    """Differential entropy in nats: ``sum_n 0.5 * ln((2 pi e)^M |Sigma_n|)``."""
    ld = _logdet(_cholesky(p.covs, "object"))
    return float(np.sum(0.5 * (p.n_bins * LN_2PI_E + ld)))


def _stack(objects: Sequence[ObjectDistribution]):
    shapes = {o.means.shape for o in objects}
    if len(shapes) != 1:
        raise AlignmentError(f"objects disagree on (pixels, bins): {sorted(shapes)}")
    return np.stack([o.means for o in objects]), np.stack([o.covs for o in objects])


def entropies(objects: Sequence[ObjectDistribution]) -> np.ndarray:
    means, covs = _stack(objects)
    ld = _logdet(_cholesky(covs, "ensemble"))
    return np.sum(0.5 * (means.shape[-1] * LN_2PI_E + ld), axis=1)


def pairwise_bhattacharyya(objects: Sequence[ObjectDistribution]) -> np.ndarray:
    """Symmetric ``K x K`` matrix of Bhattacharyya distances with a zero diagonal."""
    means, covs = _stack(objects)
    k, n, m = means.shape
    ld = _logdet(_cholesky(covs, "ensemble"))  # (K, N)
    iu, ju = np.triu_indices(k, 1)
    total = np.zeros(iu.size)
    for px in range(n):
        chol_s = _cholesky(covs[iu, px] + covs[ju, px], f"summed covariance, pixel {px}")
        quad = _mahalanobis_sq(chol_s, means[iu, px] - means[ju, px])
        total += quad / 4.0 - (ld[iu, px] + ld[ju, px]) / 4.0 + _logdet(chol_s) / 2.0 - m * LN2 / 2.0
    out = np.zeros((k, k))
    out[iu, ju] = total
    out[ju, iu] = total
    return out


def pairwise_kl(objects: Sequence[ObjectDistribution]) -> np.ndarray:
    """``K x K`` matrix with entry ``[i, j] = KL(p_i || p_j)``."""
    means, covs = _stack(objects)
    k, n, m = means.shape
    chol = _cholesky(covs, "ensemble")  # (K, N, M, M)
    ld = _logdet(chol)
    eye = np.eye(m)
    inv_chol = np.linalg.solve(chol, np.broadcast_to(eye, chol.shape))
    out = np.zeros((k, k))
    for px in range(n):
        linv = inv_chol[:, px]  # (K, M, M), Lj^-1
        delta = means[:, None, px, :] - means[None, :, px, :]  # [i, j] = mu_i - mu_j
        z = np.einsum("jab,ijb->ija", linv, delta)
        quad = np.sum(z * z, axis=-1)
        prod = np.einsum("jab,ibc->ijac", linv, chol[:, px])
        trace = np.sum(prod * prod, axis=(-2, -1))
        out += 0.5 * (quad - ld[:, None, px] + ld[None, :, px] + trace - m)
    np.fill_diagonal(out, 0.0)
    return out


def pairwise(objects: Sequence[ObjectDistribution], kind: str) -> np.ndarray:
    kind = kind.upper()
    if kind == "BD":
        return pairwise_bhattacharyya(objects)
    if kind == "KL":
        return pairwise_kl(objects)
    raise ValueError(f"unknown divergence kind {kind!r}; expected 'BD' or 'KL'")
