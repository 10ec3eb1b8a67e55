"""
Agents, the replay buffer, the state-space coverage metric and the
train-then-collect experiment loop.

Three agent kinds share one planner and one (bayesian by default) model:

* *active_inference*: extrinsic value plus parameter information gain;
* *reward_only*: extrinsic value only;
* *epsilon_greedy*: the reward-only action plus Gaussian noise, clamped.

*run_experiment()* seeds the buffer with random-action episodes, then per
epoch trains the model and collects one episode, replanning after every
observation. Every random stream is derived from the experiment seed, so a
(config, seed) pair determines the whole record.
"""

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from actinf.diffcore import ShapeError
from actinf.genmodel import GenerativeModel, ModelConfig, TrainConfig, parameter_uncertainty, train_epoch
from actinf.planner import PlannerConfig, cem_plan

logger = logging.getLogger(__name__)

ACTIVE_INFERENCE = "active_inference"
REWARD_ONLY = "reward_only"
EPSILON_GREEDY = "epsilon_greedy"
AGENT_KINDS = (ACTIVE_INFERENCE, REWARD_ONLY, EPSILON_GREEDY)

# random streams derived from the experiment seed
_STREAM_MODEL = 0
_STREAM_TRAIN = 1
_STREAM_PLAN = 2
_STREAM_ENV = 3
_STREAM_RANDOM_POLICY = 4


def stream(seed, *keys):
    """Independent generator for (seed, keys...)."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])


def env_seed(seed, episode):
    """Integer reset seed for an episode; fits the remote protocol."""
    return int(np.random.SeedSequence([int(seed), _STREAM_ENV, int(episode)]).generate_state(1)[0])


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool = False
    episode: int = 0
    step: int = 0


class ReplayBuffer:
    """
    Append-only transition store grouped into episodes. Keeps running
    mean/variance of states (both columns), actions and rewards.
    """

    def __init__(self, state_dim, action_dim):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self._transitions = []
        self._episode_starts = []
        self._arrays = None
        self._stats = {name: [0, np.zeros(dim), np.zeros(dim)] for name, dim in
                       (("state", self.state_dim), ("action", self.action_dim), ("reward", 1))}

    def __len__(self):
        return len(self._transitions)

    @property
    def episodes(self):
        return len(self._episode_starts)

    def episode(self, index):
        start = self._episode_starts[index]
        stop = self._episode_starts[index + 1] if index + 1 < self.episodes else len(self._transitions)
        return self._transitions[start:stop]

    def _accumulate(self, name, x):
        # Welford update
        entry = self._stats[name]
        entry[0] += 1
        delta = x - entry[1]
        entry[1] = entry[1] + delta / entry[0]
        entry[2] = entry[2] + delta * (x - entry[1])

    def append(self, transition):
        state = np.asarray(transition.state, dtype=np.float64)
        next_state = np.asarray(transition.next_state, dtype=np.float64)
        action = np.asarray(transition.action, dtype=np.float64).reshape(-1)
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise ShapeError(f"transition states must have shape ({self.state_dim},)")
        if action.shape != (self.action_dim,):
            raise ShapeError(f"transition action must have shape ({self.action_dim},)")
        if not (np.all(np.isfinite(state)) and np.all(np.isfinite(next_state))
                and np.all(np.isfinite(action)) and np.isfinite(transition.reward)):
            raise ValueError("transition contains non-finite values")
        current = self.episodes - 1
        if transition.episode == current + 1:
            self._episode_starts.append(len(self._transitions))
        elif transition.episode != current:
            raise ValueError(f"episode id {transition.episode} breaks contiguity (current {current})")
        transition = dataclasses.replace(transition, state=state, action=action, next_state=next_state,
                                         reward=float(transition.reward))
        self._transitions.append(transition)
        self._arrays = None
        self._accumulate("state", state)
        self._accumulate("state", next_state)
        self._accumulate("action", action)
        self._accumulate("reward", np.array([transition.reward]))

    def add_episode(self, transitions):
        for t in transitions:
            self.append(t)

    def arrays(self):
        """(states, actions, next_states, rewards) as stacked arrays."""
        if self._arrays is None:
            t = self._transitions
            self._arrays = (np.array([x.state for x in t]).reshape(-1, self.state_dim),
                            np.array([x.action for x in t]).reshape(-1, self.action_dim),
                            np.array([x.next_state for x in t]).reshape(-1, self.state_dim),
                            np.array([x.reward for x in t], dtype=np.float64))
        return self._arrays

    def statistics(self):
        out = {}
        for name, (count, mean, m2) in self._stats.items():
            var = m2 / count if count else np.zeros_like(m2)
            out[f"{name}_mean"] = mean.copy()
            out[f"{name}_std"] = np.sqrt(var)
        out["reward_mean"] = float(out["reward_mean"][0])
        out["reward_std"] = float(out["reward_std"][0])
        return out

    def sample(self, batch_size, rng):
        """Uniform with replacement; returns (states, actions, next_states, rewards)."""
        if not self._transitions:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, len(self._transitions), size=batch_size)
        return tuple(column[idx] for column in self.arrays())


@dataclass
class AgentConfig:
    kind: str = ACTIVE_INFERENCE
    noise_variance: float = 0.3
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"agent kind must be one of {AGENT_KINDS}, got {self.kind!r}")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")

    def planner_for(self, spec):
        """Planner settings for this agent kind and environment bounds."""
        changes = {"action_low": spec.action_low, "action_high": spec.action_high}
        if self.kind != ACTIVE_INFERENCE:
            changes["info_gain_weight"] = 0.0
        return dataclasses.replace(self.planner, **changes)


class CoverageGrid:
    """
    G x G occupancy histogram over a 2-D state box (mountain car by default).
    States outside the box are counted and clamped into the boundary cell.
    """

    def __init__(self, resolution=32, low=(-1.2, -0.07), high=(0.6, 0.07)):
        if resolution < 1:
            raise ValueError("coverage resolution must be positive")
        self.resolution = int(resolution)
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.counts = np.zeros((self.resolution, self.resolution), dtype=np.int64)
        self.clamped = 0
        self.history = []

    def cell(self, state):
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (2,):
            raise ShapeError(f"coverage needs 2-D states, got shape {state.shape}")
        outside = np.any(state < self.low) or np.any(state > self.high)
        frac = (state - self.low) / (self.high - self.low)
        idx = np.clip(np.floor(frac * self.resolution).astype(int), 0, self.resolution - 1)
        return (int(idx[0]), int(idx[1])), bool(outside)

    def mark(self, state):
        (i, j), outside = self.cell(state)
        if outside:
            self.clamped += 1
            logger.warning("coverage state %s outside grid box, clamped", np.asarray(state).tolist())
        self.counts[i, j] += 1

    @property
    def visited(self):
        return int(np.count_nonzero(self.counts))

    @property
    def fraction(self):
        return self.visited / self.resolution ** 2

    def end_epoch(self):
        self.history.append(self.fraction)
        return self.fraction

    def frame(self):
        i, j = np.indices(self.counts.shape)
        return pd.DataFrame({"i": i.ravel(), "j": j.ravel(), "count": self.counts.ravel()})


def coverage_update(grid, transitions):
    """
    Marks the reset state of an episode (its step-0 transition) and the next
    state of every transition; returns *grid*.
    """
    for t in transitions:
        if t.step == 0:
            grid.mark(t.state)
        grid.mark(t.next_state)
    return grid


def perturb_action(action, variance, rng):
    """Gaussian exploration noise, before clamping."""
    action = np.asarray(action, dtype=np.float64)
    if variance == 0:
        return action.copy()
    return action + np.sqrt(variance) * rng.standard_normal(action.shape)


def select_action(agent_config, model, state, rng, planner_config=None):
    """
    Plans an action for *state*. *planner_config* defaults to the agent's
    planner with its kind-specific terms; pass one with the environment
    bounds filled in.
    """
    config = planner_config or agent_config.planner
    if agent_config.kind != ACTIVE_INFERENCE and config.info_gain:
        config = dataclasses.replace(config, info_gain_weight=0.0)
    action = cem_plan(model, state, config, rng)
    if agent_config.kind == EPSILON_GREEDY:
        low, high = config.bounds(model.action_dim)
        action = np.clip(perturb_action(action, agent_config.noise_variance, rng), low, high)
    return action


def run_episode(env, policy, episode, reset_seed):
    """Runs one episode with *policy(state, step)*; returns its transitions."""
    state = env.reset(reset_seed)
    transitions = []
    for step in range(10 ** 9):
        action = np.asarray(policy(state, step), dtype=np.float64).reshape(-1)
        result = env.step(action)
        transitions.append(Transition(state, action, result.next_state, result.reward,
                                      result.terminal, episode, step))
        state = result.next_state
        if result.terminal or result.truncated:
            break
    return transitions


class ExperimentRecord:
    """
    Everything an experiment produced: metadata, per-epoch rows, wall times,
    optional per-step trace and coverage grid.
    """

    def __init__(self, metadata):
        self.metadata = dict(metadata)
        self.rows = []
        self.timings = []
        self.steps = []
        self.coverage = None
        self.model = None
        self.buffer = None

    def frame(self):
        return pd.DataFrame(self.rows)

    def actions(self):
        return [s["action"] for s in self.steps]

    def save(self, out_dir, prefix="seed"):
        """Writes ``<prefix>.csv`` (with a ``#`` metadata header) and its companions."""
        os.makedirs(out_dir, exist_ok=True)
        write_record_csv(os.path.join(out_dir, f"{prefix}.csv"), self.metadata, self.frame())
        pd.DataFrame(self.timings, columns=["epoch", "wall_time"]).to_csv(
            os.path.join(out_dir, f"timing_{prefix}.csv"), index=False)
        if self.coverage is not None:
            self.coverage.frame().to_csv(os.path.join(out_dir, f"coverage_{prefix}.csv"), index=False)
        if self.steps:
            with open(os.path.join(out_dir, f"trace_{prefix}.jsonl"), "w") as fh:
                for step in self.steps:
                    fh.write(json.dumps(step, sort_keys=True) + "\n")
        if self.model is not None:
            self.model.save(os.path.join(out_dir, f"model_{prefix}.npz"), {"seed": self.metadata.get("seed")})


def write_record_csv(path, metadata, frame):
    with open(path, "w") as fh:
        for key in sorted(metadata):
            fh.write(f"# {key}: {json.dumps(metadata[key], sort_keys=True)}\n")
        frame.to_csv(fh, index=False)


def read_record_csv(path):
    """Returns ``(metadata, frame)`` of a record CSV; ValueError names the path on failure."""
    metadata = {}
    try:
        with open(path) as fh:
            for line in fh:
                if not line.startswith("# "):
                    break
                key, _, value = line[2:].partition(": ")
                metadata[key] = json.loads(value)
        frame = pd.read_csv(path, comment="#")
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise ValueError(f"{path}: cannot read experiment record ({e})") from None
    if "epoch" not in frame.columns or "return" not in frame.columns:
        raise ValueError(f"{path}: experiment record lacks epoch/return columns")
    return metadata, frame


def _random_policy(spec, rng):
    low, high = np.asarray(spec.action_low), np.asarray(spec.action_high)
    return lambda state, step: rng.uniform(low, high)


def run_experiment(env, agent_config, epochs, seed, train_config=None, coverage=None,
                   out_dir=None, prefix=None, trace=False, metadata=None, keep_model=False):
    """
    Seeds the buffer with random episodes, then alternates training and
    collection for *epochs* epochs.

    :param coverage: a CoverageGrid updated with collected (not seed) episodes.
    :param out_dir: when given, the record is written after every epoch and
        on abort.
    :rtype: ExperimentRecord
    """
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    train_config = TrainConfig() if train_config is None else train_config
    spec = env.spec
    prefix = prefix or f"seed_{seed}"
    planner_config = agent_config.planner_for(spec)
    model = GenerativeModel(spec.state_dim, spec.action_dim, agent_config.model, train_config,
                            stream(seed, _STREAM_MODEL))
    buffer = ReplayBuffer(spec.state_dim, spec.action_dim)
    meta = {"seed": seed, "agent": agent_config.kind, "epochs": epochs, "env": env.name,
            "max_steps": spec.max_steps, "mode": agent_config.model.mode}
    if coverage is not None:
        meta["coverage_resolution"] = coverage.resolution
    meta.update(metadata or {})
    record = ExperimentRecord(meta)
    record.coverage = coverage
    record.buffer = buffer
    if keep_model:
        record.model = model

    random_rng = stream(seed, _STREAM_RANDOM_POLICY)
    episode = 0
    try:
        for _ in range(train_config.seed_episodes):
            buffer.add_episode(run_episode(env, _random_policy(spec, random_rng), episode,
                                           env_seed(seed, episode)))
            episode += 1
        logger.info("seed %s: %d seed episodes, %d transitions", seed, episode, len(buffer))

        for epoch in range(1, epochs + 1):
            started = time.perf_counter()
            losses = train_epoch(buffer, model, train_config, stream(seed, _STREAM_TRAIN, epoch))

            def policy(state, step):
                return select_action(agent_config, model, state, stream(seed, _STREAM_PLAN, epoch, step),
                                     planner_config)

            transitions = run_episode(env, policy, episode, env_seed(seed, episode))
            buffer.add_episode(transitions)
            episode += 1
            if coverage is not None:
                coverage_update(coverage, transitions)
                coverage.end_epoch()
            if trace:
                record.steps.extend({"epoch": epoch, "step": t.step, "state": t.state.tolist(),
                                     "action": t.action.tolist(), "reward": t.reward} for t in transitions)

            row = {"epoch": epoch, "return": float(sum(t.reward for t in transitions)),
                   "length": len(transitions), "transitions": len(buffer)}
            means = losses.mean() if len(losses) else None
            for column in ("state_kl", "parameter_kl", "reward_nll", "observation_nll", "total"):
                row[column] = float(means[column]) if means is not None else float("nan")
            row["parameter_uncertainty"] = (parameter_uncertainty(model) if model.transition.is_bayesian
                                            else float("nan"))
            row["coverage"] = coverage.fraction if coverage is not None else float("nan")
            record.rows.append(row)
            record.timings.append({"epoch": epoch, "wall_time": time.perf_counter() - started})
            logger.info("seed %s epoch %d: return %.3f length %d free energy %.4f", seed, epoch,
                        row["return"], row["length"], row["total"])
            if out_dir is not None:
                record.save(out_dir, prefix)
    except BaseException:
        if out_dir is not None:
            logger.error("seed %s: experiment aborted, partial record written to %s", seed, out_dir)
            record.save(out_dir, prefix)
        raise
    return record
