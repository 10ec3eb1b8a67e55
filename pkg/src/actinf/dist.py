"""
Diagonal Gaussian algebra and the nearest-neighbor entropy estimator.

Every density in the engine (beliefs over states, transition predictions,
weight posteriors, policies) is a **DiagonalGaussian**. Sampling, densities
and KL divergences are built from *diffcore* primitives so they are
differentiable when their parameters are tensors on an active tape.

*knn_entropy()* is the d-dimensional Kozachenko-Leonenko estimator

    H ~ (d/n) sum_i ln(rho_i) + ln V_d + ln(n - 1) + C_E

with *rho_i* the Euclidean distance from sample *i* to its nearest other
sample (floored at *DISTANCE_FLOOR*), *V_d* the volume of the d-dimensional
unit ball and *C_E* the Euler-Mascheroni constant.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from actinf import diffcore as dc
from actinf.diffcore import ShapeError, Tensor

logger = logging.getLogger(__name__)

# Nearest-neighbor distances are clamped below by this value so coincident
# samples keep the logarithm finite.
DISTANCE_FLOOR = 1e-12

EULER_GAMMA = float(np.euler_gamma)

_LOG_2PI = math.log(2.0 * math.pi)

# rows per block in the pairwise distance scan
_BLOCK_ROWS = 512


def _values(x):
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class DiagonalGaussian:
    """
    Gaussian with independent coordinates.

    :param mean: mean vector (or array whose last axis is the event axis).
    :type mean: Tensor or array-like
    :param variance: strictly positive variances, same shape as *mean* or
        broadcastable to it.
    :type variance: Tensor or array-like
    """

    def __init__(self, mean, variance):
        if not isinstance(mean, Tensor):
            mean = np.asarray(mean, dtype=np.float64)
        if not isinstance(variance, Tensor):
            variance = np.asarray(variance, dtype=np.float64)
        m, v = _values(mean), _values(variance)
        try:
            np.broadcast_shapes(m.shape, v.shape)
        except ValueError:
            raise ShapeError(f"mean shape {m.shape} and variance shape {v.shape} differ") from None
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise ValueError("Gaussian parameters must be finite")
        if np.any(v <= 0):
            raise ValueError("Gaussian variance must be strictly positive")
        self.mean = mean
        self.variance = variance

    @classmethod
    def standard(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self):
        return _values(self.mean).shape[-1]

    def mean_values(self):
        return _values(self.mean)

    def variance_values(self):
        return np.broadcast_to(_values(self.variance), _values(self.mean).shape)

    def sample(self, rng, size=None):
        """Plain numpy draw, outside any tape."""
        shape = _values(self.mean).shape if size is None else tuple(np.atleast_1d(size)) + _values(self.mean).shape
        noise = rng.standard_normal(shape)
        return self.mean_values() + np.sqrt(self.variance_values()) * noise

    def __repr__(self):
        return f"DiagonalGaussian(dim={self.dim})"


def _check_event(name, shape_a, shape_b):
    if shape_a[-1:] != shape_b[-1:]:
        raise ShapeError(f"{name}: dimension mismatch {shape_a} vs {shape_b}")


def reparam_sample(g, noise):
    """
    Returns ``mean + sqrt(variance) * noise`` as a Tensor, differentiable
    in the mean and the variance of *g*.
    """
    noise = np.asarray(noise, dtype=np.float64)
    _check_event("reparam_sample", _values(g.mean).shape, noise.shape)
    return dc.add(g.mean, dc.mul(dc.sqrt(g.variance), noise))


def log_prob(g, x):
    """
    Log-density of *x* under *g*, summed over the last axis. Returns a Tensor
    (scalar for a single vector, one value per row for a batch).
    """
    _check_event("log_prob", _values(g.mean).shape, np.shape(_values(x)))
    diff = dc.sub(x, g.mean)
    var = dc.as_tensor(g.variance)
    terms = dc.sub(dc.mul(-0.5, dc.add(dc.log(var), _LOG_2PI)),
                   dc.div(dc.square(diff), dc.mul(2.0, var)))
    return dc.sum(terms, axis=-1)


def kl_divergence(q, p):
    """
    Analytic KL[q || p] between diagonal Gaussians, summed over the last axis.
    """
    _check_event("kl_divergence", _values(q.mean).shape, _values(p.mean).shape)
    vq = dc.as_tensor(q.variance)
    vp = dc.as_tensor(p.variance)
    log_ratio = dc.mul(0.5, dc.log(dc.div(vp, vq)))
    spread = dc.div(dc.add(vq, dc.square(dc.sub(q.mean, p.mean))), dc.mul(2.0, vp))
    return dc.sum(dc.sub(dc.add(log_ratio, spread), 0.5), axis=-1)


@dataclass
class SampleBatch:
    """n samples of dimension d, stored as an n x d matrix."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ShapeError(f"sample batch must be n x d, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("sample batch contains non-finite entries")
        self.values = values

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    n: int
    d: int
    distance_floor: float

    def __float__(self):
        return self.value


def log_unit_ball_volume(d):
    return 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d + 1.0))


def nearest_neighbor_distances(x, distance_floor=None):
    """
    Euclidean distance from each sample to its nearest other sample.

    *x* has shape (..., n, d); leading axes are independent sample sets.
    Exact pairwise scan in row blocks. Result shape (..., n), clamped below
    by *distance_floor* (default *DISTANCE_FLOOR*).
    """
    floor = DISTANCE_FLOOR if distance_floor is None else distance_floor
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-2]
    nearest = np.empty(x.shape[:-1])
    for start in range(0, n, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, n)
        diff = x[..., start:stop, None, :] - x[..., None, :, :]
        d2 = np.einsum("...ijk,...ijk->...ij", diff, diff)
        rows = np.arange(stop - start)
        d2[..., rows, rows + start] = np.inf
        nearest[..., start:stop] = d2.min(axis=-1)
    return np.maximum(np.sqrt(nearest), floor)


def knn_entropy_values(x, distance_floor=None):
    """
    Vectorized estimator over sample sets of shape (..., n, d); returns the
    entropy of every set, shape (...).
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape[-2], x.shape[-1]
    if n < 2:
        raise ValueError(f"entropy estimation needs at least 2 samples, got {n}")
    return _entropy_from_distances(nearest_neighbor_distances(x, distance_floor), d)


def _entropy_from_distances(rho, d):
    n = rho.shape[-1]
    return (d * np.log(rho).mean(axis=-1) + log_unit_ball_volume(d)
            + math.log(n - 1) + EULER_GAMMA)


def knn_entropy(samples, distance_floor=None):
    """
    Kozachenko-Leonenko differential entropy estimate in nats.

    :param samples: the samples; a bare array is wrapped as a SampleBatch.
    :type samples: SampleBatch or array-like
    :rtype: EntropyEstimate
    """
    if not isinstance(samples, SampleBatch):
        samples = SampleBatch(samples)
    if samples.n < 2:
        raise ValueError(f"entropy estimation needs at least 2 samples, got {samples.n}")
    floor = DISTANCE_FLOOR if distance_floor is None else distance_floor
    rho = nearest_neighbor_distances(samples.values, floor)
    floored = int(np.count_nonzero(rho <= floor))
    if floored:
        logger.debug("%d of %d nearest-neighbor distances at the floor %g", floored, samples.n, floor)
    value = float(_entropy_from_distances(rho, samples.d))
    return EntropyEstimate(value=value, n=samples.n, d=samples.d, distance_floor=floor)
