"""
Fast numerical oracle suite behind ``actinf selftest``.

Each check returns a row with the measured error next to its threshold.
"""

import math
import time

import numpy as np
import pandas as pd

from actinf import diffcore as dc
from actinf.dist import DiagonalGaussian, kl_divergence, knn_entropy
from actinf.planner import PlannerConfig, cem_optimize

GRADIENT_TOLERANCE = 1e-5
KL_TOLERANCE = 1e-2
ENTROPY_TOLERANCE = 0.07
SCALING_TOLERANCE = 0.1
CEM_TOLERANCE = 0.05

GAUSSIAN_ENTROPY = 0.5 * math.log(2.0 * math.pi * math.e)


def _random_graph(rng):
    """A small random graph over most primitives; inputs kept away from ReLU kinks."""
    kind = rng.integers(3)
    w1 = dc.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    b1 = dc.Tensor(rng.normal(size=5), requires_grad=True)
    w2 = dc.Tensor(rng.normal(size=(5, 2)) * 0.5, requires_grad=True)
    target = rng.normal(size=(4, 2))
    while True:
        x = rng.normal(size=(4, 3))
        if np.min(np.abs(x @ w1.values + b1.values)) > 1e-3:
            break

    def loss():
        z = dc.add(dc.matmul(x, w1), b1)
        if kind == 0:
            h = dc.relu(z)
        elif kind == 1:
            h = dc.softplus(z)
        else:
            h = dc.exp(dc.mul(z, 0.3))
        y = dc.matmul(h, w2)
        fit = dc.mean(dc.square(dc.sub(y, target)))
        soft = dc.add(dc.softplus(y), 1.0)
        extra = dc.mul(0.1, dc.sum(dc.log(soft)))
        smooth = dc.mean(dc.sqrt(dc.add(dc.square(y), 1.0)))
        mixed = dc.mean(dc.concatenate([dc.neg(y), dc.div(y, soft)], axis=-1))
        first = dc.sum(dc.index(y, (Ellipsis, slice(0, 1))))
        return dc.add(dc.add(dc.add(fit, extra), dc.add(smooth, mixed)), dc.mul(0.01, first))

    return loss, [w1, b1, w2]


def check_gradients(graphs=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(graphs):
        loss, params = _random_graph(rng)
        tape = dc.ComputationTape()
        dc.forward(tape, loss)
        analytic = dc.gradients(tape, params)
        numeric = dc.numerical_gradient(loss, params, h=1e-5)
        worst = max(worst, dc.relative_error(analytic, numeric))
    return worst


def check_kl(pairs=10, samples=10 ** 6, dim=3, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        mq, mp = rng.normal(size=dim), rng.normal(size=dim)
        vq, vp = rng.uniform(0.5, 2.0, size=dim), rng.uniform(0.5, 2.0, size=dim)
        analytic = float(kl_divergence(DiagonalGaussian(mq, vq), DiagonalGaussian(mp, vp)))
        x = mq + np.sqrt(vq) * rng.standard_normal((samples, dim))
        log_q = -0.5 * (np.log(2 * np.pi * vq) + (x - mq) ** 2 / vq)
        log_p = -0.5 * (np.log(2 * np.pi * vp) + (x - mp) ** 2 / vp)
        estimate = float(np.mean(np.sum(log_q - log_p, axis=1)))
        worst = max(worst, abs(analytic - estimate))
    return worst


def check_entropy(bias=0.0, samples=1000, repeats=5, seed=2):
    """Mean of independent 1-D standard normal estimates against the closed form."""
    rng = np.random.default_rng(seed)
    estimates = [knn_entropy(rng.standard_normal((samples, 1))).value + bias for _ in range(repeats)]
    return abs(float(np.mean(estimates)) - GAUSSIAN_ENTROPY)


def check_entropy_scaling(samples=5000, dim=2, factor=3.0, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, dim))
    shift = knn_entropy(factor * x).value - knn_entropy(x).value
    return abs(shift - dim * math.log(factor))


def check_cem(horizon=12, seed=4):
    rng = np.random.default_rng(seed)
    c = rng.uniform(-0.5, 0.5, size=(horizon, 1))
    config = PlannerConfig(H=horizon)

    def score(candidates):
        return -np.sum((candidates - c) ** 2, axis=(1, 2))

    action, _, _ = cem_optimize(score, horizon, 1, config, rng)
    return float(np.max(np.abs(action - c[0])))


def run_selftest(entropy_bias=0.0):
    """
    Runs every check; returns a DataFrame with columns *check*, *measured*,
    *threshold*, *passed* and *seconds*.

    :param entropy_bias: added to the entropy estimates (fault injection).
    """
    checks = [
        ("autodiff vs finite differences", check_gradients, GRADIENT_TOLERANCE),
        ("KL vs Monte Carlo", check_kl, KL_TOLERANCE),
        ("entropy vs analytic", lambda: check_entropy(entropy_bias), ENTROPY_TOLERANCE),
        ("entropy scaling shift", check_entropy_scaling, SCALING_TOLERANCE),
        ("CEM on quadratic", check_cem, CEM_TOLERANCE),
    ]
    rows = []
    for name, fn, threshold in checks:
        started = time.perf_counter()
        measured = fn()
        rows.append({"check": name, "measured": measured, "threshold": threshold,
                     "passed": bool(measured <= threshold), "seconds": round(time.perf_counter() - started, 3)})
    return pd.DataFrame(rows)
