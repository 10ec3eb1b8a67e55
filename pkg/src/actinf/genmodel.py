"""
Generative model for fully observed environments and its free-energy training.

The model has these parts:

* **TransitionModel**: a two-hidden-layer ReLU network f_theta(s, a).
  In *bayesian* mode its weights carry a factorized Gaussian posterior
  (**VariationalWeights**) and the predicted next state has a fixed unit
  variance. In *point* mode the weights are plain tensors and the network
  also outputs a (softplus) variance head.
* **RewardModel**: a point-estimate network f_alpha(s) giving the mean of a
  unit-variance Gaussian over rewards.
* **ObservationMaps**: identity likelihood and recognition maps with fixed
  variances. They are never optimized.
* **Normalizer**: standardization statistics taken from the replay buffer.

*free_energy_batch()* evaluates the per-transition free energy (state
divergence, weighted parameter divergence, reward and observation negative
log-likelihoods) on a minibatch and returns its gradients. *train_epoch()*
runs a number of such minibatches through Adam.

All network computations are done in normalized units; rewards predicted
for planning are de-standardized by the caller through the normalizer.
"""

import logging
from collections import namedtuple
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from actinf import diffcore as dc
from actinf.diffcore import OptimizerState, ShapeError, Tensor
from actinf.dist import DiagonalGaussian, kl_divergence, log_prob, reparam_sample

logger = logging.getLogger(__name__)

BAYESIAN = "bayesian"
POINT_ESTIMATE = "point"
MODES = (BAYESIAN, POINT_ESTIMATE)

# floor added to every learned variance
VARIANCE_FLOOR = 1e-6


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class ModelConfig:
    """
    Architecture and variational settings of the generative model.

    *recognition_variance* of *None* means 1.0 in bayesian mode and 0.1 in
    point mode. *kl_weight* of *None* means batch_size / dataset_size.
    """

    mode: str = BAYESIAN
    hidden: tuple = (500, 500)
    reward_hidden: tuple = (200, 200)
    init_variance: float = 0.05
    transition_variance: float = 1.0
    recognition_variance: float = None
    likelihood_variance: float = 1.0
    K: int = 1
    kl_weight: float = None
    observation_nll: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"model mode must be one of {MODES}, got {self.mode!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.reward_hidden = tuple(int(h) for h in self.reward_hidden)
        if not self.hidden or min(self.hidden) < 1 or (self.reward_hidden and min(self.reward_hidden) < 1):
            raise ValueError("hidden layer widths must be positive")
        if self.init_variance <= 0:
            raise ValueError("init_variance must be positive")
        if self.transition_variance < 0:
            raise ValueError("transition_variance must be non-negative")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")

    @property
    def effective_recognition_variance(self):
        if self.recognition_variance is not None:
            return self.recognition_variance
        return 1.0 if self.mode == BAYESIAN else 0.1


@dataclass
class TrainConfig:
    """Minibatch schedule and Adam settings. *seed_episodes* random episodes start every run."""

    batches: int = 100
    batch_size: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed_episodes: int = 5

    def __post_init__(self):
        if self.batches < 0 or self.batch_size < 1:
            raise ValueError("batches must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.seed_episodes < 0:
            raise ValueError("seed_episodes must be non-negative")


def _layer_shapes(sizes):
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes.append((fan_in, fan_out))
        shapes.append((fan_out,))
    return shapes


def _init_values(shapes, rng):
    """Fan-in scaled uniform weights, zero biases."""
    values = []
    for shape in shapes:
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            values.append(rng.uniform(-bound, bound, size=shape))
        else:
            values.append(np.zeros(shape))
    return values


def mlp(params, x):
    """ReLU network on tensors; *params* alternates weight matrices and biases."""
    h = x
    last = len(params) - 2
    for i in range(0, len(params), 2):
        h = dc.add(dc.matmul(h, params[i]), params[i + 1])
        if i < last:
            h = dc.relu(h)
    return h


def mlp_values(params, x):
    """Same network on plain arrays, for planning."""
    h = x
    last = len(params) - 2
    for i in range(0, len(params), 2):
        h = h @ params[i] + params[i + 1]
        if i < last:
            h = np.maximum(h, 0.0)
    return h


class VariationalWeights:
    """
    Factorized Gaussian posterior over every scalar weight of a network.

    Variances are ``softplus(rho) + VARIANCE_FLOOR`` so *rho* is unconstrained.
    The prior is fixed at N(0, I).
    """

    def __init__(self, shapes, rng, init_variance=0.05):
        self.shapes = [tuple(s) for s in shapes]
        rho = float(softplus_inverse(max(init_variance - VARIANCE_FLOOR, VARIANCE_FLOOR)))
        self.means = [Tensor(v, requires_grad=True, name=f"mu{i}")
                      for i, v in enumerate(_init_values(self.shapes, rng))]
        self.rhos = [Tensor(np.full(s, rho), requires_grad=True, name=f"rho{i}")
                     for i, s in enumerate(self.shapes)]

    def parameters(self):
        return self.means + self.rhos

    @property
    def count(self):
        return int(sum(np.prod(s) for s in self.shapes))

    def variances(self):
        return [np.logaddexp(0.0, r.values) + VARIANCE_FLOOR for r in self.rhos]

    def variance_tensors(self):
        return [dc.add(dc.softplus(r), VARIANCE_FLOOR) for r in self.rhos]

    def sample(self, rng):
        """Reparameterized weight draw, recorded on the active tape."""
        return [reparam_sample(DiagonalGaussian(m, v), rng.standard_normal(m.shape))
                for m, v in zip(self.means, self.variance_tensors())]

    def sample_values(self, rng, deterministic=False):
        if deterministic:
            return [m.values for m in self.means]
        return [m.values + np.sqrt(v) * rng.standard_normal(m.shape)
                for m, v in zip(self.means, self.variances())]

    def kl_to_prior(self):
        total = Tensor(0.0)
        for m, v in zip(self.means, self.variance_tensors()):
            prior = DiagonalGaussian(np.zeros(m.shape), np.ones(m.shape))
            total = dc.add(total, dc.sum(kl_divergence(DiagonalGaussian(m, v), prior)))
        return total

    def mean_variance(self):
        return float(sum(v.sum() for v in self.variances()) / self.count)


class TransitionModel:
    """
    Network f_theta mapping (state, action) to a Gaussian over the next state.
    """

    def __init__(self, state_dim, action_dim, hidden=(500, 500), mode=BAYESIAN,
                 init_variance=0.05, transition_variance=1.0, rng=None):
        if mode not in MODES:
            raise ValueError(f"model mode must be one of {MODES}, got {mode!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(hidden)
        self.mode = mode
        self.transition_variance = float(transition_variance)
        out_dim = self.state_dim if mode == BAYESIAN else 2 * self.state_dim
        self.shapes = _layer_shapes((self.state_dim + self.action_dim,) + self.hidden + (out_dim,))
        # set False to use the posterior means instead of sampled weights
        self.sample_weights = True
        if mode == BAYESIAN:
            self.weights = VariationalWeights(self.shapes, rng, init_variance)
        else:
            self.weights = [Tensor(v, requires_grad=True, name=f"w{i}")
                            for i, v in enumerate(_init_values(self.shapes, rng))]

    @property
    def is_bayesian(self):
        return self.mode == BAYESIAN

    @property
    def output_dim(self):
        return self.shapes[-1][0]

    def parameters(self):
        return self.weights.parameters() if self.is_bayesian else list(self.weights)

    def sample_theta(self, rng):
        if not self.is_bayesian:
            return list(self.weights)
        if not self.sample_weights:
            return list(self.weights.means)
        return self.weights.sample(rng)

    def theta_values(self, rng=None, deterministic=False):
        if not self.is_bayesian:
            return [w.values for w in self.weights]
        return self.weights.sample_values(rng, deterministic or not self.sample_weights)

    def predict(self, theta, states, actions):
        x = dc.concatenate([dc.as_tensor(states), dc.as_tensor(actions)], axis=-1)
        out = mlp(theta, x)
        if self.is_bayesian:
            variance = np.full(out.shape, max(self.transition_variance, VARIANCE_FLOOR))
            return DiagonalGaussian(out, variance)
        d = self.state_dim
        mean = dc.index(out, (Ellipsis, slice(0, d)))
        variance = dc.add(dc.softplus(dc.index(out, (Ellipsis, slice(d, 2 * d)))), VARIANCE_FLOOR)
        return DiagonalGaussian(mean, variance)

    def predict_values(self, theta_values, x):
        """
        Numpy forward pass on concatenated (state, action) rows. Returns
        ``(mean, variance)``; in bayesian mode the variance is the configured
        transition variance, which may be 0.
        """
        out = mlp_values(theta_values, x)
        if self.is_bayesian:
            return out, np.full(out.shape, self.transition_variance)
        d = self.state_dim
        return out[..., :d], np.logaddexp(0.0, out[..., d:]) + VARIANCE_FLOOR

    def architecture(self):
        return {"state_dim": self.state_dim, "action_dim": self.action_dim,
                "hidden": list(self.hidden), "mode": self.mode,
                "transition_variance": self.transition_variance}


class RewardModel:
    """Point-estimate network f_alpha(s), the mean of a unit-variance reward Gaussian."""

    def __init__(self, state_dim, hidden=(200, 200), rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.state_dim = int(state_dim)
        self.hidden = tuple(hidden)
        self.shapes = _layer_shapes((self.state_dim,) + self.hidden + (1,))
        self.weights = [Tensor(v, requires_grad=True, name=f"alpha{i}")
                        for i, v in enumerate(_init_values(self.shapes, rng))]

    def parameters(self):
        return list(self.weights)

    def predict(self, states):
        """Tensor of shape (batch, 1)."""
        return mlp(self.weights, dc.as_tensor(states))

    def predict_values(self, states):
        """Array of shape (batch,)."""
        return mlp_values([w.values for w in self.weights], states)[..., 0]


class ObservationMaps:
    """
    Identity likelihood and recognition maps of the fully observed case.
    Their variances are fixed and never trained.
    """

    def __init__(self, recognition_variance=1.0, likelihood_variance=1.0):
        if recognition_variance <= 0 or likelihood_variance <= 0:
            raise ValueError("observation map variances must be positive")
        self._recognition_variance = float(recognition_variance)
        self._likelihood_variance = float(likelihood_variance)

    @property
    def recognition_variance(self):
        return self._recognition_variance

    @property
    def likelihood_variance(self):
        return self._likelihood_variance

    def recognize(self, observations):
        observations = np.asarray(observations, dtype=np.float64)
        return DiagonalGaussian(observations, np.full(observations.shape, self._recognition_variance))

    def likelihood(self, states):
        states = dc.as_tensor(states)
        return DiagonalGaussian(states, np.full(states.shape, self._likelihood_variance))


@dataclass
class FreeEnergyTerms:
    state_kl: float
    parameter_kl: float
    reward_nll: float
    observation_nll: float
    total: float
    k_theta_samples: int = 1
    kl_weight: float = 1.0

    def as_dict(self):
        return asdict(self)


TransitionBatch = namedtuple("TransitionBatch", "states actions next_states rewards")


class Normalizer:
    """
    Standardization of states, actions and rewards. Zero-variance columns
    are left at unit scale.
    """

    def __init__(self, state_dim, action_dim):
        self.state_mean = np.zeros(state_dim)
        self.state_std = np.ones(state_dim)
        self.action_mean = np.zeros(action_dim)
        self.action_std = np.ones(action_dim)
        self.reward_mean = 0.0
        self.reward_std = 1.0

    @staticmethod
    def _scale(std):
        std = np.asarray(std, dtype=np.float64)
        return np.where(std > 1e-12, std, 1.0)

    def fit(self, stats):
        """*stats* maps ``state_mean``, ``state_std``, ... to arrays (see ReplayBuffer.statistics)."""
        self.state_mean = np.asarray(stats["state_mean"], dtype=np.float64)
        self.state_std = self._scale(stats["state_std"])
        self.action_mean = np.asarray(stats["action_mean"], dtype=np.float64)
        self.action_std = self._scale(stats["action_std"])
        self.reward_mean = float(stats["reward_mean"])
        self.reward_std = float(self._scale(stats["reward_std"]))
        return self

    def normalize_state(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_std

    def denormalize_state(self, s):
        return np.asarray(s) * self.state_std + self.state_mean

    def normalize_action(self, a):
        return (np.asarray(a) - self.action_mean) / self.action_std

    def normalize_reward(self, r):
        return (np.asarray(r) - self.reward_mean) / self.reward_std

    def denormalize_reward(self, r):
        return np.asarray(r) * self.reward_std + self.reward_mean

    def to_dict(self):
        return {"state_mean": self.state_mean, "state_std": self.state_std,
                "action_mean": self.action_mean, "action_std": self.action_std,
                "reward_mean": np.array(self.reward_mean), "reward_std": np.array(self.reward_std)}


class GenerativeModel:
    """
    Everything the planner reads and a checkpoint stores: transition and
    reward networks, observation maps, normalizer and optimizer state.
    """

    def __init__(self, state_dim, action_dim, config=None, train_config=None, rng=None):
        self.config = ModelConfig() if config is None else config
        train_config = TrainConfig() if train_config is None else train_config
        rng = np.random.default_rng() if rng is None else rng
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.transition = TransitionModel(state_dim, action_dim, self.config.hidden, self.config.mode,
                                          self.config.init_variance, self.config.transition_variance, rng)
        self.reward = RewardModel(state_dim, self.config.reward_hidden, rng)
        self.maps = ObservationMaps(self.config.effective_recognition_variance,
                                    self.config.likelihood_variance)
        self.normalizer = Normalizer(state_dim, action_dim)
        self.optimizer = OptimizerState(self.parameters(), lr=train_config.learning_rate,
                                        beta1=train_config.beta1, beta2=train_config.beta2,
                                        eps=train_config.epsilon)

    @property
    def mode(self):
        return self.config.mode

    def parameters(self):
        return self.transition.parameters() + self.reward.parameters()

    def named_parameters(self):
        names = {}
        if self.transition.is_bayesian:
            for i, t in enumerate(self.transition.weights.means):
                names[f"transition/mean{i}"] = t
            for i, t in enumerate(self.transition.weights.rhos):
                names[f"transition/rho{i}"] = t
        else:
            for i, t in enumerate(self.transition.weights):
                names[f"transition/w{i}"] = t
        for i, t in enumerate(self.reward.weights):
            names[f"reward/w{i}"] = t
        return names

    def save(self, path, metadata=None):
        params = dict(self.named_parameters())
        for key, value in self.normalizer.to_dict().items():
            params[f"normalizer/{key}"] = value
        meta = {"mode": self.mode, "architecture": self.transition.architecture(),
                "config": {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in asdict(self.config).items()}}
        meta.update(metadata or {})
        dc.save_checkpoint(path, params, self.optimizer, meta)

    @classmethod
    def load(cls, path):
        params, optimizer, meta = dc.load_checkpoint(path)
        config = ModelConfig(**meta["config"])
        arch = meta["architecture"]
        model = cls(arch["state_dim"], arch["action_dim"], config, rng=np.random.default_rng(0))
        for name, tensor in model.named_parameters().items():
            if params[name].shape != tensor.shape:
                raise ShapeError(f"{path}: {name} has shape {params[name].shape}, model expects {tensor.shape}")
            tensor.values = params[name]
        model.normalizer.fit({key: params[f"normalizer/{key}"] for key in model.normalizer.to_dict()})
        if optimizer is not None:
            model.optimizer.load_state_dict(*optimizer)
        return model


def predict_next_state(model, state, action, theta_sample):
    """
    Gaussian over the next (normalized) state for one or many (state, action)
    pairs under the weight assignment *theta_sample*.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape[-1] != model.state_dim or action.shape[-1] != model.action_dim:
        raise ShapeError(f"model expects state dim {model.state_dim} and action dim {model.action_dim}, "
                         f"got {state.shape[-1]} and {action.shape[-1]}")
    if len(theta_sample) != len(model.shapes):
        raise ShapeError(f"theta sample has {len(theta_sample)} tensors, model has {len(model.shapes)}")
    return model.predict(theta_sample, state[None] if state.ndim == 1 else state,
                         action[None] if action.ndim == 1 else action)


def free_energy_batch(batch, model, reward_model, maps, K=1, rng=None, kl_weight=1.0,
                      observation_nll=True):
    """
    Free energy of a minibatch of normalized transitions and its gradients.

    The data terms are summed over the batch, so *kl_weight* of
    batch_size / dataset_size keeps the full-dataset bound.

    :param batch: normalized (states, actions, next_states, rewards).
    :type batch: TransitionBatch
    :param K: number of reparameterized weight draws for the state divergence.
    :param observation_nll: when False the observation term is still reported
        but left out of *total*.
    :return: ``(FreeEnergyTerms, gradients)`` with one gradient per entry of
        ``model.parameters() + reward_model.parameters()``.
    """
    if len(batch.states) == 0:
        raise ValueError("free energy needs a non-empty batch")
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    states = np.asarray(batch.states, dtype=np.float64)
    next_states = np.asarray(batch.next_states, dtype=np.float64)
    rewards = np.asarray(batch.rewards, dtype=np.float64).reshape(-1, 1)
    params = model.parameters() + reward_model.parameters()

    tape = dc.ComputationTape()
    with tape:
        q_prev = maps.recognize(states)
        q_next = maps.recognize(next_states)
        state_kl = Tensor(0.0)
        for _ in range(K):
            theta = model.sample_theta(rng)
            s_prev = reparam_sample(q_prev, rng.standard_normal(states.shape))
            prior = model.predict(theta, s_prev, batch.actions)
            state_kl = dc.add(state_kl, dc.sum(kl_divergence(q_next, prior)))
        state_kl = dc.mul(state_kl, 1.0 / K)

        parameter_kl = model.weights.kl_to_prior() if model.is_bayesian else Tensor(0.0)

        s_next = reparam_sample(q_next, rng.standard_normal(next_states.shape))
        reward_belief = DiagonalGaussian(reward_model.predict(s_next), np.ones(rewards.shape))
        reward_nll = dc.neg(dc.sum(log_prob(reward_belief, rewards)))
        obs_nll = dc.neg(dc.sum(log_prob(maps.likelihood(s_next), next_states)))

        total = dc.add(dc.add(state_kl, dc.mul(parameter_kl, kl_weight)), reward_nll)
        if observation_nll:
            total = dc.add(total, obs_nll)

    grads = dc.gradients(tape, params, output=total)
    terms = FreeEnergyTerms(state_kl=float(state_kl), parameter_kl=float(parameter_kl),
                            reward_nll=float(reward_nll), observation_nll=float(obs_nll),
                            total=float(total), k_theta_samples=K, kl_weight=kl_weight)
    return terms, grads


def normalized_batch(normalizer, states, actions, next_states, rewards):
    return TransitionBatch(normalizer.normalize_state(states), normalizer.normalize_action(actions),
                           normalizer.normalize_state(next_states), normalizer.normalize_reward(rewards))


def train_epoch(buffer, model, config=None, rng=None, optimizer=None):
    """
    Refits the normalizer to *buffer* and runs ``config.batches`` Adam steps
    on minibatches sampled uniformly with replacement.

    :param buffer: anything with ``len()``, ``sample()`` and ``statistics()``
        (a *ReplayBuffer*).
    :param model: the GenerativeModel to train in place.
    :param optimizer: defaults to ``model.optimizer``.
    :return: pandas DataFrame, one row of loss terms per batch.
    """
    config = TrainConfig() if config is None else config
    rng = np.random.default_rng() if rng is None else rng
    optimizer = model.optimizer if optimizer is None else optimizer
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot train on an empty replay buffer")

    model.normalizer.fit(buffer.statistics())
    kl_weight = model.config.kl_weight
    if kl_weight is None:
        kl_weight = config.batch_size / n
    params = model.parameters()

    rows = []
    for _ in range(config.batches):
        batch = normalized_batch(model.normalizer, *buffer.sample(config.batch_size, rng))
        terms, grads = free_energy_batch(batch, model.transition, model.reward, model.maps,
                                         model.config.K, rng, kl_weight, model.config.observation_nll)
        if not np.isfinite(terms.total):
            raise dc.NonFiniteError("free energy became non-finite")
        dc.optimizer_step(optimizer, params, grads)
        rows.append(terms.as_dict())
    columns = list(FreeEnergyTerms.__dataclass_fields__)
    frame = pd.DataFrame(rows, columns=columns)
    if rows:
        logger.debug("trained %d batches, mean free energy %.4f", len(rows), frame["total"].mean())
    return frame


def parameter_uncertainty(model):
    """
    Mean posterior variance over all transition weights.

    :param model: a GenerativeModel or TransitionModel in bayesian mode.
    """
    transition = getattr(model, "transition", model)
    if not transition.is_bayesian:
        raise ValueError("parameter uncertainty is only defined in bayesian mode")
    return transition.weights.mean_variance()
