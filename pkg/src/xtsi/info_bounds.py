"""Bounds on mutual information between data and a binary class label, and on error probability.

Entropies and mutual information are carried in nats. Conversion to bits
happens only where the binary-entropy (Fano) and Hu-type inversions are
applied, since those functions are defined in base 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np
from scipy.optimize import bisect
from scipy.special import logsumexp

from . import divergence
from .divergence import ObjectDistribution
from .errors import ConsistencyError, PreconditionError, ValidationError

INVERSION_XTOL = 1e-12
CONSISTENCY_TOL = 1e-9


def _xlogx(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def nats_to_bits(x):
    return x / np.log(2.0)


def bits_to_nats(x):
    return x * np.log(2.0)


class EnsembleSpec:
    """Weighted mixture of object distributions with two class labels.

    ``pairs`` optionally lists ``(i, j)`` index pairs that match every object
    of the first class with exactly one object of the second. Pairwise
    divergence matrices and entropies are computed once and cached.
    """

    def __init__(self, objects: Sequence[ObjectDistribution], weights, labels: Sequence[Hashable],
                 pairs: Sequence[tuple[int, int]] | None = None):
        self.objects = list(objects)
        self.weights = np.asarray(weights, dtype=float)
        self.labels = list(labels)
        k = len(self.objects)
        if k == 0 or self.weights.shape != (k,) or len(self.labels) != k:
            raise ValidationError("objects, weights and labels must have the same non-zero length")
        if np.any(self.weights <= 0):
            raise ValidationError("component weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValidationError(f"component weights sum to {self.weights.sum()!r}, not 1")
        self.classes = list(dict.fromkeys(self.labels))
        if len(self.classes) != 2:
            raise ValidationError(f"exactly two class labels required, found {self.classes}")
        self.class_index = [np.flatnonzero([lab == c for lab in self.labels]) for c in self.classes]
        self.priors = np.array([self.weights[idx].sum() for idx in self.class_index])
        self.pairs = None if pairs is None else self._check_pairs(pairs)

    def _check_pairs(self, pairs):
        pairs = [(int(i), int(j)) for i, j in pairs]
        first, second = (set(idx.tolist()) for idx in self.class_index)
        if len(first) != len(second):
            raise ValidationError("pairing requires equal object counts in both classes")
        used_i = [i for i, _ in pairs]
        used_j = [j for _, j in pairs]
        if set(used_i) != first or set(used_j) != second or len(pairs) != len(first):
            raise ValidationError("pairs must match every first-class object with one second-class object")
        return pairs

    @property
    def k(self) -> int:
        return len(self.objects)

    @property
    def hc(self) -> float:
        """Class-label entropy in nats."""
        return float(-np.sum(_xlogx(self.priors)))

    @property
    def p_min(self) -> float:
        return float(self.priors.min())

    @cached_property
    def entropies(self) -> np.ndarray:
        return divergence.entropies(self.objects)

    @cached_property
    def bd(self) -> np.ndarray:
        return divergence.pairwise_bhattacharyya(self.objects)

    @cached_property
    def kl(self) -> np.ndarray:
        return divergence.pairwise_kl(self.objects)

    def divergence_matrix(self, kind: str) -> np.ndarray:
        kind = kind.upper()
        if kind == "BD":
            return self.bd
        if kind == "KL":
            return self.kl
        raise ValueError(f"unknown divergence kind {kind!r}")


def mixture_entropy_bound(weights, component_entropies, div) -> float:
    """``sum_i a_i H_i - sum_i a_i ln sum_j a_j exp(-D_ij)``, inner sum in log domain."""
    a = np.asarray(weights, dtype=float)
    h = np.asarray(component_entropies, dtype=float)
    inner = logsumexp(np.log(a)[None, :] - np.asarray(div, dtype=float), axis=1)
    return float(a @ h - a @ inner)


def _subset_bound(ens: EnsembleSpec, idx, kind: str) -> float:
    a = ens.weights[idx]
    a = a / a.sum()
    d = ens.divergence_matrix(kind)[np.ix_(idx, idx)]
    return mixture_entropy_bound(a, ens.entropies[idx], d)


def entropy_bound(ens: EnsembleSpec, kind: str) -> float:
    """Pairwise-divergence entropy estimate of the full mixture (nats).

    With ``kind='BD'`` this is a lower bound on the mixture entropy, with
    ``kind='KL'`` an upper bound. Class labels are ignored.
    """
    return mixture_entropy_bound(ens.weights, ens.entropies, ens.divergence_matrix(kind))


def is_bounds_main(ens: EnsembleSpec) -> tuple[float, float]:
    """Mixture-entropy bounds on I(g; C): BD/KL on the full mixture, KL/BD per class."""
    cond_kl = sum(p * _subset_bound(ens, idx, "KL") for p, idx in zip(ens.priors, ens.class_index))
    cond_bd = sum(p * _subset_bound(ens, idx, "BD") for p, idx in zip(ens.priors, ens.class_index))
    lower = entropy_bound(ens, "BD") - cond_kl
    upper = entropy_bound(ens, "KL") - cond_bd
    return float(lower), float(upper)


def is_upper_paired(ens: EnsembleSpec) -> float:
    """Upper bound on I(g; C) from conditioning on the pair index.

    ``H(C) - sum_i a_i H(g_i) + sum_pairs (a_i1 + a_i2) [H_KL(pair) - H_pair(C)]``
    where ``H_pair(C)`` is the label entropy within the pair.
    """
    if ens.pairs is None:
        raise PreconditionError("the paired upper bound needs a pairing of the two classes")
    a, h = ens.weights, ens.entropies
    total = ens.hc - float(a @ h)
    for i, j in ens.pairs:
        idx = np.array([i, j])
        mass = a[idx].sum()
        r = a[idx] / mass
        pair_label_entropy = float(-np.sum(_xlogx(r)))
        total += mass * (_subset_bound(ens, idx, "KL") - pair_label_entropy)
    return float(total)


def is_lower_class_bd(ens: EnsembleSpec) -> float:
    """Lower bound on I(g; C) from pairwise Bhattacharyya distances across classes.

    ``H(C) - sum_c P_c ln[1 + P_c'^0.5 / P_c^1.5 * sum_{i in c, j in c'} (a_i a_j)^0.5 exp(-BD_ij)]``
    """
    a = ens.weights
    total = ens.hc
    for c in range(2):
        idx, other = ens.class_index[c], ens.class_index[1 - c]
        p, q = ens.priors[c], ens.priors[1 - c]
        log_terms = (0.5 * np.log(a[idx])[:, None] + 0.5 * np.log(a[other])[None, :]
                     - ens.bd[np.ix_(idx, other)])
        log_inner = 0.5 * np.log(q) - 1.5 * np.log(p) + logsumexp(log_terms)
        total -= p * np.logaddexp(0.0, log_inner)
    return float(total)


@dataclass(frozen=True)
class BoundsResult:
    """Combined bounds on I(g; C) (nats) and on the error probability.

    ``lower_source`` / ``upper_source`` name the estimator that was active:
    ``main`` for the mixture-entropy pair, ``class_bd`` for the class-level
    Bhattacharyya lower bound, ``paired`` for the pair-conditioned upper
    bound. ``pe_upper_kovalevskij`` is the looser error bound that holds for
    any data distribution.
    """

    is_lower: float
    is_upper: float
    pe_lower: float
    pe_upper: float
    pe_upper_kovalevskij: float
    hc: float
    p_min: float
    main_lower: float
    main_upper: float
    class_bd_lower: float
    paired_upper: float | None
    lower_source: str
    upper_source: str

    @property
    def is_lower_bits(self) -> float:
        return float(nats_to_bits(self.is_lower))

    @property
    def is_upper_bits(self) -> float:
        return float(nats_to_bits(self.is_upper))

    @property
    def hc_bits(self) -> float:
        return float(nats_to_bits(self.hc))


def combined_is_bounds(ens: EnsembleSpec, detail: bool = False):
    """Tightest available bounds on I(g; C), clamped to [0, H(C)].

    Raises ConsistencyError if the raw lower bound exceeds the raw upper
    bound by more than 1e-9 nats.
    """
    main_lower, main_upper = is_bounds_main(ens)
    class_lower = is_lower_class_bd(ens)
    paired = is_upper_paired(ens) if ens.pairs is not None else None

    lower, lower_source = (main_lower, "main") if main_lower >= class_lower else (class_lower, "class_bd")
    upper, upper_source = main_upper, "main"
    if paired is not None and paired < upper:
        upper, upper_source = paired, "paired"
    if lower > upper + CONSISTENCY_TOL:
        raise ConsistencyError(f"I_S lower bound {lower!r} exceeds upper bound {upper!r}")

    hc = ens.hc
    lower_c = min(max(lower, 0.0), hc)
    upper_c = min(max(upper, 0.0), hc)
    lower_c = min(lower_c, upper_c)
    if not detail:
        return lower_c, upper_c
    return lower_c, upper_c, dict(main_lower=main_lower, main_upper=main_upper,
                                  class_bd_lower=class_lower, paired_upper=paired,
                                  lower_source=lower_source, upper_source=upper_source)


def binary_entropy(x):
    """``h_b(x) = -x log2 x - (1 - x) log2(1 - x)`` in bits."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("binary entropy is defined on [0, 1]")
    out = -(_xlogx(x) + _xlogx(1.0 - x)) / np.log(2.0)
    return float(out) if out.ndim == 0 else out


def _invert_increasing(f, target: float, lo: float, hi: float) -> float:
    if target <= f(lo):
        return lo
    if target >= f(hi):
        return hi
    return float(bisect(lambda x: f(x) - target, lo, hi, xtol=INVERSION_XTOL, maxiter=200))


def binary_entropy_inverse(h: float) -> float:
    """Unique ``x`` in [0, 1/2] with ``h_b(x) = h``, by bisection."""
    if not 0.0 <= h <= 1.0:
        raise ValueError(f"binary entropy inverse needs h in [0, 1], got {h!r}")
    return _invert_increasing(binary_entropy, float(h), 0.0, 0.5)


def f_ub(x, p_min: float):
    """``-P log2(P / (x + P)) - x log2(x / (x + P))`` with ``P = p_min``."""
    x = np.asarray(x, dtype=float)
    s = x + p_min
    out = -(p_min * np.log(p_min / s) + _xlogx(x) - x * np.log(np.where(s > 0, s, 1.0))) / np.log(2.0)
    return float(out) if out.ndim == 0 else out


def f_ub_inverse(h: float, p_min: float) -> float:
    """Inverse of :func:`f_ub` on [0, p_min]; saturates at ``p_min``."""
    if h < 0:
        raise ValueError("f_ub inverse needs a non-negative argument")
    return _invert_increasing(lambda x: f_ub(x, p_min), float(h), 0.0, p_min)


def _priors_pair(priors):
    p = np.asarray(priors, dtype=float)
    if p.shape == ():
        p = np.array([float(p), 1.0 - float(p)])
    if p.shape != (2,) or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("priors must be two positive probabilities summing to 1")
    return p


def pe_lower_fano(is_bits: float, priors) -> float:
    """Fano lower bound ``h_b^-1(H(C) - I_S)``; ``is_bits`` in bits."""
    p = _priors_pair(priors)
    hc = binary_entropy(p[0])
    gap = min(max(hc - is_bits, 0.0), hc)
    return binary_entropy_inverse(gap)


def pe_upper_hu(is_bits: float, priors) -> float:
    """Upper bound ``min(P_min, f_ub^-1(H(C) - I_S))``; ``is_bits`` in bits.

    The underlying entropy inequality is proved for the label entropy given a
    binary decision. Applied to I_S of continuous data it can fall below the
    Bayes error (two unit Gaussians four standard deviations apart already do
    this); :func:`pe_upper_kovalevskij` is the guaranteed alternative.
    """
    p = _priors_pair(priors)
    hc = binary_entropy(p[0])
    p_min = float(p.min())
    gap = min(max(hc - is_bits, 0.0), hc)
    return min(p_min, f_ub_inverse(gap, p_min))


def pe_upper_kovalevskij(is_bits: float, priors) -> float:
    """Upper bound ``min(P_min, (H(C) - I_S) / 2)`` in bits.

    Valid for the Bayes error of any data distribution, unlike
    :func:`pe_upper_hu`, whose entropy inequality holds for the output of a
    binary decision rather than for continuous data.
    """
    p = _priors_pair(priors)
    hc = binary_entropy(p[0])
    gap = min(max(hc - is_bits, 0.0), hc)
    return min(float(p.min()), 0.5 * gap)


def pe_bounds(ens: EnsembleSpec) -> BoundsResult:
    """Error-probability bounds from the combined I_S bounds.

    The upper I_S bound feeds the Fano lower bound on P_e and the lower I_S
    bound feeds both upper bounds. When the I_S interval contains I_S,
    ``pe_lower`` and ``pe_upper_kovalevskij`` are guaranteed to bracket P_e;
    ``pe_upper`` (the f_ub form) is tighter but carries no such guarantee.
    """
    lower, upper, info = combined_is_bounds(ens, detail=True)
    priors = ens.priors
    pe_lo = pe_lower_fano(float(nats_to_bits(upper)), priors)
    pe_hi = pe_upper_hu(float(nats_to_bits(lower)), priors)
    # the exact values satisfy pe_lo <= pe_hi; bisection noise near 0 can flip them
    pe_lo = min(pe_lo, pe_hi)
    pe_kov = pe_upper_kovalevskij(float(nats_to_bits(lower)), priors)
    return BoundsResult(is_lower=lower, is_upper=upper, pe_lower=pe_lo, pe_upper=pe_hi,
                        pe_upper_kovalevskij=pe_kov, hc=ens.hc, p_min=ens.p_min, **info)
