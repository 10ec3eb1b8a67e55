"""
Policy selection by expected free energy.

A candidate policy is a sequence of H actions. *propagate()* rolls B
weight samples x J particles through the learned transition model along the
policy; *expected_free_energy()* scores the resulting particle cloud as

    extrinsic       = sum over steps of the mean predicted reward
    param_info_gain = weight * sum over steps of the entropy of the pooled
                      B*J particles (nearest-neighbor estimate)

both oriented so that larger is better. *cem_plan()* refines a diagonal
Gaussian over policies with the cross-entropy method and returns the mean
first action.

All particle states live in the model's normalized units. Predicted rewards
are de-standardized before they are summed.
"""

import concurrent.futures
import logging
from dataclasses import dataclass

import numpy as np

from actinf.diffcore import NonFiniteError, ShapeError
from actinf.dist import knn_entropy_values

logger = logging.getLogger(__name__)


@dataclass
class PlannerConfig:
    """
    Cross-entropy-method and particle settings.

    :param H: lookahead horizon.
    :param N: candidates per iteration.
    :param M: elites refitted per iteration.
    :param I: iterations.
    :param B: weight samples per candidate (forced to 1 in point mode).
    :param J: particles per weight sample.
    :param info_gain_weight: multiplier of the information gain term; 0
        disables it.
    :param extrinsic: include the predicted reward term.
    :param action_low: lower action bound (scalar or per dimension).
    :param action_high: upper action bound.
    :param workers: threads used to score candidates.
    """

    H: int = 12
    N: int = 1000
    M: int = 100
    I: int = 10  # noqa: E741
    B: int = 5
    J: int = 4
    info_gain_weight: float = 1.0
    extrinsic: bool = True
    action_low: object = -1.0
    action_high: object = 1.0
    variance_floor: float = 1e-4
    particle_clamp: float = 1e6
    particle_noise: bool = True
    workers: int = 1
    trace: bool = False

    def __post_init__(self):
        for name in ("H", "N", "M", "I", "B", "J", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"planner {name} must be positive")
        if self.M > self.N:
            raise ValueError(f"planner M ({self.M}) must not exceed N ({self.N})")
        if self.variance_floor <= 0:
            raise ValueError("planner variance_floor must be positive")
        if np.any(np.asarray(self.action_low, dtype=float) > np.asarray(self.action_high, dtype=float)):
            raise ValueError("planner action_low exceeds action_high")

    @property
    def info_gain(self):
        return self.info_gain_weight != 0

    def bounds(self, action_dim):
        low = np.broadcast_to(np.asarray(self.action_low, dtype=np.float64), (action_dim,))
        high = np.broadcast_to(np.asarray(self.action_high, dtype=np.float64), (action_dim,))
        return low, high


class PolicyDistribution:
    """Diagonal Gaussian over H x d_a action sequences."""

    def __init__(self, horizon, action_dim, mean=None, variance=None):
        if horizon < 1 or action_dim < 1:
            raise ValueError("policy horizon and action dimension must be positive")
        self.horizon = horizon
        self.action_dim = action_dim
        shape = (horizon, action_dim)
        self.mean = np.zeros(shape) if mean is None else np.array(mean, dtype=np.float64).reshape(shape)
        self.variance = np.ones(shape) if variance is None else np.array(variance, dtype=np.float64).reshape(shape)
        if np.any(self.variance <= 0):
            raise ValueError("policy variance must be positive")

    def sample(self, n, rng):
        noise = rng.standard_normal((n, self.horizon, self.action_dim))
        return self.mean + np.sqrt(self.variance) * noise

    def refit(self, elites, variance_floor=1e-4):
        self.mean = elites.mean(axis=0)
        self.variance = np.maximum(elites.var(axis=0), variance_floor)
        return self

    def first_action(self):
        return self.mean[0].copy()


@dataclass
class ParticleSet:
    """
    *states*: (..., H, B, J, d_s) normalized states after each step.
    *rewards*: (..., H, B, J) predicted reward means in environment units.
    """

    states: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        if self.states.shape[:-1] != self.rewards.shape:
            raise ShapeError(f"particle states {self.states.shape} and rewards {self.rewards.shape} disagree")
        if self.B * self.J < 2:
            raise ValueError("a particle set needs at least 2 particles per step")

    @property
    def H(self):
        return self.states.shape[-4]

    @property
    def B(self):
        return self.states.shape[-3]

    @property
    def J(self):
        return self.states.shape[-2]

    def pooled(self):
        """States with weight samples and particles merged: (..., H, B*J, d_s)."""
        shape = self.states.shape
        return self.states.reshape(shape[:-3] + (shape[-3] * shape[-2], shape[-1]))


@dataclass
class EfeBreakdown:
    """Negative expected free energy and its terms; larger is better."""

    extrinsic: object
    param_info_gain: object
    total: object


def draw_theta(model, B, rng):
    """B weight samples in bayesian mode, the single point estimate otherwise."""
    if not model.transition.is_bayesian:
        return [model.transition.theta_values()]
    return [model.transition.theta_values(rng) for _ in range(B)]


def propagate(model, start_state, policy, B=5, J=4, rng=None, theta=None, noise=None,
              particle_noise=True, clamp=1e6, bounds=None):
    """
    Rolls particles along one policy (H, d_a) or a batch of policies
    (N, H, d_a).

    :param model: GenerativeModel.
    :param start_state: current state in environment units.
    :param theta: optional list of weight samples; drawn from *rng* if absent.
    :param noise: optional standard normal draws of shape (N, H, B, J, d_s).
    :param bounds: optional ``(low, high)``; actions outside raise ValueError.
    :rtype: ParticleSet (leading N axis only when a batch was given)
    """
    rng = np.random.default_rng() if rng is None else rng
    policy = np.asarray(policy, dtype=np.float64)
    single = policy.ndim == 2
    if single:
        policy = policy[None]
    n, horizon, action_dim = policy.shape
    if action_dim != model.action_dim:
        raise ShapeError(f"policy action dim {action_dim} != model action dim {model.action_dim}")
    if bounds is not None and (np.any(policy < bounds[0]) or np.any(policy > bounds[1])):
        raise ValueError("policy actions outside the action bounds")
    if theta is None:
        theta = draw_theta(model, B, rng)
    B = len(theta)
    d = model.state_dim
    if B * J < 2:
        raise ValueError(f"propagation needs B*J >= 2, got B={B} J={J}")
    if particle_noise and noise is None:
        noise = rng.standard_normal((n, horizon, B, J, d))

    s0 = model.normalizer.normalize_state(np.asarray(start_state, dtype=np.float64))
    current = np.broadcast_to(s0, (n, B, J, d)).copy()
    actions = model.normalizer.normalize_action(policy)
    states = np.empty((n, horizon, B, J, d))
    clamped = False
    for tau in range(horizon):
        a = np.broadcast_to(actions[:, tau, None, :], (n, J, action_dim))
        for b in range(B):
            x = np.concatenate([current[:, b], a], axis=-1).reshape(n * J, d + action_dim)
            mean, var = model.transition.predict_values(theta[b], x)
            nxt = mean.reshape(n, J, d)
            if particle_noise:
                nxt = nxt + np.sqrt(var).reshape(n, J, d) * noise[:, tau, b]
            current[:, b] = nxt
        if np.any(np.abs(current) > clamp):
            clamped = True
            np.clip(current, -clamp, clamp, out=current)
        if not np.all(np.isfinite(current)):
            raise NonFiniteError(f"non-finite particle at lookahead step {tau}")
        states[:, tau] = current
    if clamped:
        logger.warning("particles clamped to +/-%g during propagation", clamp)

    rewards = model.reward.predict_values(states.reshape(-1, d)).reshape(n, horizon, B, J)
    rewards = model.normalizer.denormalize_reward(rewards)
    if single:
        return ParticleSet(states[0], rewards[0])
    return ParticleSet(states, rewards)


def expected_free_energy(particles, config):
    """
    Scores particle sets. Works on a single set or a leading batch axis; the
    terms are floats or arrays accordingly.
    """
    lead = particles.rewards.shape[:-3]
    if config.extrinsic:
        extrinsic = particles.rewards.mean(axis=(-2, -1)).sum(axis=-1)
    else:
        extrinsic = np.zeros(lead)
    if config.info_gain:
        entropies = knn_entropy_values(particles.pooled())
        info_gain = config.info_gain_weight * entropies.sum(axis=-1)
    else:
        info_gain = np.zeros(lead)
    total = extrinsic + info_gain
    if not lead:
        extrinsic, info_gain, total = float(extrinsic), float(info_gain), float(total)
    return EfeBreakdown(extrinsic=extrinsic, param_info_gain=info_gain, total=total)


def cem_optimize(score_fn, horizon, action_dim, config, rng, low=None, high=None):
    """
    Cross-entropy method over action sequences.

    *score_fn(candidates)* maps an (n, H, d_a) array to n scores (larger is
    better). Elites of one iteration join the next iteration's pool with
    their scores, so the mean elite score never decreases.

    :return: ``(first_action, PolicyDistribution, elite_mean_history)``
    """
    if low is None or high is None:
        low, high = config.bounds(action_dim)
    policy = PolicyDistribution(horizon, action_dim)
    elites = None
    elite_scores = None
    history = []
    for iteration in range(config.I):
        candidates = np.clip(policy.sample(config.N, rng), low, high)
        scores = np.asarray(score_fn(candidates), dtype=np.float64).reshape(-1)
        if scores.shape[0] != candidates.shape[0]:
            raise ShapeError(f"score function returned {scores.shape[0]} scores for {candidates.shape[0]} candidates")
        if elites is not None:
            candidates = np.concatenate([candidates, elites])
            scores = np.concatenate([scores, elite_scores])
        finite = np.isfinite(scores)
        if not finite.any():
            raise NonFiniteError("every candidate policy scored non-finite")
        scores = np.where(finite, scores, -np.inf)
        order = np.argsort(-scores, kind="stable")[:config.M]
        elites = candidates[order]
        elite_scores = scores[order]
        policy.refit(elites, config.variance_floor)
        history.append(float(elite_scores.mean()))
        if config.trace:
            logger.debug("cem iteration %d: elite mean %.6g", iteration, history[-1],
                         extra={"iteration": iteration, "elite_scores": elite_scores.tolist(),
                                "policy_mean": policy.mean.tolist()})
    return np.clip(policy.first_action(), low, high), policy, history


def _score_chunks(model, state, candidates, theta, noise, config):
    def score(index):
        part = slice(index[0], index[-1] + 1)
        particles = propagate(model, state, candidates[part], J=config.J, theta=theta,
                              noise=None if noise is None else noise[part],
                              particle_noise=config.particle_noise, clamp=config.particle_clamp)
        return expected_free_energy(particles, config).total

    chunks = np.array_split(np.arange(len(candidates)), min(config.workers, len(candidates)))
    if len(chunks) == 1:
        return score(chunks[0])
    with concurrent.futures.ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return np.concatenate(list(pool.map(score, chunks)))


def cem_plan(model, current_state, config, rng, score_fn=None):
    """
    Plans one action from *current_state* (environment units).

    The B weight samples are drawn once per call and shared by every
    candidate; each iteration draws the particle noise of all candidates
    before scoring, so the result does not depend on *config.workers*.
    *score_fn* replaces particle scoring entirely.
    """
    low, high = config.bounds(model.action_dim)
    if score_fn is None:
        theta = draw_theta(model, config.B, rng)
        shape = (config.H, len(theta), config.J, model.state_dim)

        def score_fn(candidates):
            noise = rng.standard_normal((len(candidates),) + shape) if config.particle_noise else None
            return _score_chunks(model, current_state, candidates, theta, noise, config)

    action, _, _ = cem_optimize(score_fn, config.H, model.action_dim, config, rng, low, high)
    return action
