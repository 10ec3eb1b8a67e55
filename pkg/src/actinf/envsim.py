"""
Environments: continuous mountain car, pendulum swing-up, a synthetic linear
system, an action-repeat wrapper and a line-delimited JSON protocol for
environments living in another process.

    env = MountainCar()
    state = env.reset(seed=1)
    result = env.step([1.0])
    result.next_state, result.reward, result.terminal, result.truncated

Remote protocol (one JSON object per line, ``type`` field first):

    hello              -> spec {d_s, d_a, bounds: [low, high], max_steps, ...}
    reset {seed}       -> state {s}
    step {a}           -> result {s, r, terminal, truncated}
    anything malformed -> error {message}, then the session is closed

Floats are written with Python's shortest round-trip representation, so
values survive the wire bit for bit.
"""

import json
import logging
import math
import socket
import socketserver
from dataclasses import dataclass

import numpy as np

from actinf.diffcore import ShapeError

logger = logging.getLogger(__name__)

# Log a warning whenever an action is clamped into bounds.
WARN_ON_CLAMP = True

DEFAULT_TIMEOUT = 10.0


class ProtocolError(RuntimeError):
    """The remote environment broke the protocol, failed, or timed out."""


@dataclass
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    max_steps: int
    reward_range: tuple = (-math.inf, math.inf)
    state_low: tuple = None
    state_high: tuple = None

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("environment dimensions must be at least 1")
        self.action_low = tuple(float(x) for x in np.broadcast_to(self.action_low, (self.action_dim,)))
        self.action_high = tuple(float(x) for x in np.broadcast_to(self.action_high, (self.action_dim,)))
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))):
            raise ValueError("action bounds must be finite")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        self.reward_range = tuple(float(x) for x in self.reward_range)
        if self.state_low is not None:
            self.state_low = tuple(float(x) for x in self.state_low)
            self.state_high = tuple(float(x) for x in self.state_high)

    def to_message(self):
        msg = {"type": "spec", "d_s": self.state_dim, "d_a": self.action_dim,
               "bounds": [list(self.action_low), list(self.action_high)],
               "max_steps": self.max_steps}
        if self.state_low is not None:
            msg["state_bounds"] = [list(self.state_low), list(self.state_high)]
        return msg

    @classmethod
    def from_message(cls, msg):
        try:
            low, high = msg["bounds"]
            state_low, state_high = msg.get("state_bounds") or (None, None)
            return cls(int(msg["d_s"]), int(msg["d_a"]), tuple(low), tuple(high), int(msg["max_steps"]),
                       state_low=state_low, state_high=state_high)
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"invalid spec message: {e}") from None


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    terminal: bool = False
    truncated: bool = False


class Environment:
    """
    Base class of in-process environments. Subclasses set *spec* and
    implement *_reset(rng)* and *_step(action)*; the base class clamps
    actions, counts steps and truncates at ``spec.max_steps``.
    """

    name = "environment"
    spec = None

    def __init__(self):
        self._state = None
        self._steps = 0

    @property
    def state(self):
        return None if self._state is None else self._state.copy()

    def clamp_action(self, action):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != self.spec.action_dim:
            raise ShapeError(f"{self.name}: expected {self.spec.action_dim} action values, got {action.shape[0]}")
        clipped = np.clip(action, self.spec.action_low, self.spec.action_high)
        if WARN_ON_CLAMP and not np.array_equal(clipped, action):
            logger.warning("%s: action %s clamped to %s", self.name, action.tolist(), clipped.tolist())
        return clipped

    def reset(self, seed=None):
        self._state = np.asarray(self._reset(np.random.default_rng(seed)), dtype=np.float64)
        self._steps = 0
        return self.state

    def step(self, action):
        if self._state is None:
            raise RuntimeError(f"{self.name}: step() before reset()")
        result = self._step(self.clamp_action(action))
        self._steps += 1
        self._state = result.next_state
        if not result.terminal and self._steps >= self.spec.max_steps:
            result.truncated = True
        result.next_state = result.next_state.copy()
        return result

    def _reset(self, rng):
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


MOUNTAIN_CAR_LOW = (-1.2, -0.07)
MOUNTAIN_CAR_HIGH = (0.6, 0.07)
MOUNTAIN_CAR_GOAL = 0.45


def mountain_car_step(state, action):
    """
    One step of continuous mountain car.

    :param state: (position, velocity)
    :param action: force in [-1, 1] (clamped)
    """
    p, v = float(state[0]), float(state[1])
    a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
    v = min(max(v + 0.0015 * a - 0.0025 * math.cos(3.0 * p), MOUNTAIN_CAR_LOW[1]), MOUNTAIN_CAR_HIGH[1])
    p = min(max(p + v, MOUNTAIN_CAR_LOW[0]), MOUNTAIN_CAR_HIGH[0])
    if p <= MOUNTAIN_CAR_LOW[0] and v < 0:
        v = 0.0
    terminal = p >= MOUNTAIN_CAR_GOAL
    reward = 100.0 if terminal else -0.1 * a * a
    return StepResult(np.array([p, v]), reward, terminal)


class MountainCar(Environment):
    name = "mountaincar"

    def __init__(self, max_steps=200):
        super().__init__()
        self.spec = EnvSpec(2, 1, (-1.0,), (1.0,), max_steps, (-0.1 * max_steps, 100.0),
                            MOUNTAIN_CAR_LOW, MOUNTAIN_CAR_HIGH)

    def _reset(self, rng):
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def _step(self, action):
        return mountain_car_step(self._state, action)


PENDULUM_G = 10.0
PENDULUM_M = 1.0
PENDULUM_L = 1.0
PENDULUM_DT = 0.05
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0


def wrap_angle(theta):
    """Maps an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def pendulum_energy(theta, theta_dot):
    """Mechanical energy of the rod (zero potential at the pivot, upright is theta=0)."""
    return (PENDULUM_M * PENDULUM_L ** 2 / 6.0) * theta_dot ** 2 + \
        0.5 * PENDULUM_M * PENDULUM_G * PENDULUM_L * math.cos(theta)


def pendulum_step(state, action):
    """
    One step of pendulum swing-up.

    :param state: (cos theta, sin theta, theta_dot), theta = 0 upright
    :param action: torque in [-2, 2] (clamped)
    """
    theta = math.atan2(float(state[1]), float(state[0]))
    theta_dot = float(state[2])
    u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -PENDULUM_MAX_TORQUE,
                      PENDULUM_MAX_TORQUE))
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u ** 2)
    accel = 3.0 * PENDULUM_G / (2.0 * PENDULUM_L) * math.sin(theta) + \
        3.0 / (PENDULUM_M * PENDULUM_L ** 2) * u
    theta_dot = min(max(theta_dot + accel * PENDULUM_DT, -PENDULUM_MAX_SPEED), PENDULUM_MAX_SPEED)
    theta = theta + theta_dot * PENDULUM_DT
    return StepResult(np.array([math.cos(theta), math.sin(theta), theta_dot]), reward, False)


class Pendulum(Environment):
    name = "pendulum"

    def __init__(self, max_steps=200):
        super().__init__()
        worst = math.pi ** 2 + 0.1 * PENDULUM_MAX_SPEED ** 2 + 0.001 * PENDULUM_MAX_TORQUE ** 2
        self.spec = EnvSpec(3, 1, (-PENDULUM_MAX_TORQUE,), (PENDULUM_MAX_TORQUE,), max_steps,
                            (-worst, 0.0), (-1.0, -1.0, -PENDULUM_MAX_SPEED), (1.0, 1.0, PENDULUM_MAX_SPEED))

    def _reset(self, rng):
        theta = -rng.uniform(-math.pi, math.pi)
        return np.array([math.cos(theta), math.sin(theta), rng.uniform(-1.0, 1.0)])

    def _step(self, action):
        return pendulum_step(self._state, action)


class LinearSystem(Environment):
    """
    s' = A s + B a + noise, reward -|s'|^2. Defaults to a lightly damped
    2-D rotation driven by one action.
    """

    name = "linear"

    def __init__(self, A=None, B=None, noise_std=0.01, max_steps=100, state_dim=2, action_dim=1):
        super().__init__()
        if A is None:
            A = np.array([[0.99, 0.1], [-0.1, 0.99]]) if state_dim == 2 else 0.95 * np.eye(state_dim)
        if B is None:
            B = np.full((state_dim, action_dim), 0.1)
            if state_dim == 2 and action_dim == 1:
                B = np.array([[0.0], [0.1]])
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        if self.A.shape[0] != self.A.shape[1] or self.B.shape[0] != self.A.shape[0]:
            raise ShapeError(f"linear system matrices A {self.A.shape} and B {self.B.shape} disagree")
        self.noise_std = float(noise_std)
        self.spec = EnvSpec(self.A.shape[0], self.B.shape[1], -1.0, 1.0, max_steps)
        self._rng = np.random.default_rng()

    def _reset(self, rng):
        self._rng = rng
        return rng.uniform(-1.0, 1.0, size=self.spec.state_dim)

    def transition(self, state, action):
        return self.A @ np.asarray(state, dtype=np.float64) + self.B @ np.asarray(action, dtype=np.float64)

    def _step(self, action):
        nxt = self.transition(self._state, action)
        if self.noise_std > 0:
            nxt = nxt + self.noise_std * self._rng.standard_normal(nxt.shape)
        return StepResult(nxt, -float(nxt @ nxt), False)


class ActionRepeat(Environment):
    """Applies each agent action *k* times, summing rewards."""

    def __init__(self, env, k):
        super().__init__()
        if k < 1:
            raise ValueError("action repeat must be at least 1")
        self.env = env
        self.k = int(k)
        self.name = f"{env.name}x{self.k}"
        inner = env.spec
        self.spec = EnvSpec(inner.state_dim, inner.action_dim, inner.action_low, inner.action_high,
                            -(-inner.max_steps // self.k), inner.reward_range, inner.state_low, inner.state_high)

    @property
    def state(self):
        return self.env.state

    def reset(self, seed=None):
        return self.env.reset(seed)

    def step(self, action):
        total = 0.0
        for _ in range(self.k):
            result = self.env.step(action)
            total += result.reward
            if result.terminal or result.truncated:
                break
        result.reward = total
        return result


def action_repeat(env, k):
    return env if k == 1 else ActionRepeat(env, k)


ENVIRONMENTS = {
    "mountaincar": MountainCar,
    "pendulum": Pendulum,
    "linear": LinearSystem,
}


def make_env(name, action_repeat_k=1, max_steps=None):
    """Builds a registered environment, optionally wrapped in an action repeat."""
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    env = cls() if max_steps is None else cls(max_steps=max_steps)
    return action_repeat(env, action_repeat_k)


def parse_endpoint(endpoint):
    """Accepts ``host:port``, ``tcp://host:port`` or a ``(host, port)`` pair."""
    if isinstance(endpoint, (tuple, list)):
        return str(endpoint[0]), int(endpoint[1])
    text = str(endpoint)
    if text.startswith("tcp://"):
        text = text[len("tcp://"):]
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def _encode(msg):
    return (json.dumps(msg, allow_nan=False) + "\n").encode("utf-8")


class RemoteEnv(Environment):
    """
    Client side of the remote environment protocol. Requests are serialized
    on one connection; every reply must arrive within *timeout* seconds.
    """

    name = "remote"

    def __init__(self, endpoint, timeout=DEFAULT_TIMEOUT):
        super().__init__()
        self.endpoint = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_connection(self.endpoint, timeout=timeout)
        except OSError as e:
            raise ProtocolError(f"cannot connect to {self.endpoint[0]}:{self.endpoint[1]}: {e}") from None
        self._sock.settimeout(timeout)
        self._file = self._sock.makefile("rwb")
        self.spec = EnvSpec.from_message(self._request({"type": "hello"}, "spec"))
        logger.info("remote environment at %s:%d: d_s=%d d_a=%d", *self.endpoint,
                    self.spec.state_dim, self.spec.action_dim)

    def _request(self, msg, expected):
        if self._file is None:
            raise ProtocolError("session is closed")
        try:
            self._file.write(_encode(msg))
            self._file.flush()
            line = self._file.readline()
        except socket.timeout:
            self.close()
            raise ProtocolError(f"timed out waiting for {expected!r}") from None
        except OSError as e:
            self.close()
            raise ProtocolError(f"connection failed: {e}") from None
        if not line:
            self.close()
            raise ProtocolError("connection closed by remote environment")
        try:
            reply = json.loads(line)
        except ValueError:
            self.close()
            raise ProtocolError(f"malformed reply: {line[:80]!r}") from None
        if not isinstance(reply, dict):
            self.close()
            raise ProtocolError(f"reply is not an object: {line[:80]!r}")
        if reply.get("type") == "error":
            self.close()
            raise ProtocolError(f"remote error: {reply.get('message')}")
        if reply.get("type") != expected:
            self.close()
            raise ProtocolError(f"expected {expected!r} reply, got {reply.get('type')!r}")
        return reply

    def _vector(self, values, dim, what):
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (dim,):
            self.close()
            raise ProtocolError(f"{what} has shape {vec.shape}, negotiated dimension is {dim}")
        return vec

    def reset(self, seed=None):
        reply = self._request({"type": "reset", "seed": seed}, "state")
        self._state = self._vector(reply.get("s"), self.spec.state_dim, "state")
        self._steps = 0
        return self.state

    def step(self, action):
        action = self.clamp_action(action)
        reply = self._request({"type": "step", "a": action.tolist()}, "result")
        try:
            result = StepResult(self._vector(reply["s"], self.spec.state_dim, "state"), float(reply["r"]),
                                bool(reply["terminal"]), bool(reply["truncated"]))
        except (KeyError, TypeError, ValueError) as e:
            self.close()
            raise ProtocolError(f"invalid result message: {e}") from None
        self._state = result.next_state
        self._steps += 1
        return result

    def close(self):
        if self._file is not None:
            try:
                self._file.close()
                self._sock.close()
            except OSError:
                pass
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def remote_env(endpoint, timeout=DEFAULT_TIMEOUT):
    return RemoteEnv(endpoint, timeout)


class _EnvHandler(socketserver.StreamRequestHandler):
    """One session: a fresh environment per connection."""

    def handle(self):
        env = self.server.env_factory()
        for line in self.rfile:
            try:
                reply = self._dispatch(env, json.loads(line))
            except Exception as e:
                logger.warning("remote session %s: %s", self.client_address, e)
                self.wfile.write(_encode({"type": "error", "message": str(e)}))
                return
            self.wfile.write(_encode(reply))

    @staticmethod
    def _dispatch(env, msg):
        if not isinstance(msg, dict):
            raise ValueError("message is not an object")
        kind = msg.get("type")
        if kind == "hello":
            return env.spec.to_message()
        if kind == "reset":
            seed = msg.get("seed")
            return {"type": "state", "s": env.reset(None if seed is None else int(seed)).tolist()}
        if kind == "step":
            action = np.asarray(msg["a"], dtype=np.float64)
            if action.shape != (env.spec.action_dim,):
                raise ValueError(f"action has shape {action.shape}, expected ({env.spec.action_dim},)")
            result = env.step(action)
            return {"type": "result", "s": result.next_state.tolist(), "r": result.reward,
                    "terminal": bool(result.terminal), "truncated": bool(result.truncated)}
        raise ValueError(f"unknown message type {kind!r}")


class EnvServer(socketserver.ThreadingTCPServer):
    """
    Hosts environments built by *env_factory* behind the remote protocol.
    Port 0 picks a free port; see *address*.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, env_factory, host="127.0.0.1", port=0):
        self.env_factory = env_factory
        super().__init__((host, port), _EnvHandler)

    @property
    def address(self):
        return self.server_address[0], self.server_address[1]


def serve_env(env_factory, host="127.0.0.1", port=0):
    return EnvServer(env_factory, host, port)
