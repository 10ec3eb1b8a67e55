"""
Minimal reverse-mode automatic differentiation over dense 64-bit tensors.

Enough machinery to train small fully connected ReLU networks: a **Tensor**
wraps a numpy array, every primitive applied while a **ComputationTape** is
active is recorded on that tape, and *backward()* replays the tape in reverse
accumulating gradients. **OptimizerState** implements adaptive-moment
(Adam) updates, and *save_checkpoint()/load_checkpoint()* persist named
parameters with their optimizer moments.

    import actinf.diffcore as dc

    w = dc.Tensor([[0.5], [-1.0]], requires_grad=True)
    x = dc.Tensor([[1.0, 2.0]])
    tape = dc.ComputationTape()
    loss = tape.forward(lambda x: dc.sum(dc.square(dc.relu(x @ w))), x)
    grads = tape.backward()
    grads[w]  # d(loss)/dw

Tapes are thread-local: several threads may each record on their own tape
while reading the same parameters.
"""

import json
import threading

import numpy as np
from scipy.special import expit

# Raise NonFiniteError as soon as a primitive produces NaN or Inf.
CHECK_FINITE = True

CHECKPOINT_FORMAT = "actinf-checkpoint"
CHECKPOINT_VERSION = 1

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A value or gradient became NaN or infinite."""


class TapeError(RuntimeError):
    """The tape was used out of order (e.g. backward before forward)."""


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Returns the innermost tape recording on this thread, or *None*."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(values, what):
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite value in {what}")


class Tensor:
    """
    Dense 64-bit array with an optional gradient.

    *values* is copied into a float64 array. Leaves that should receive
    gradients are created with *requires_grad=True*; results of primitives
    inherit the flag from their inputs.
    """

    __array_priority__ = 100

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=np.float64)
        _check_finite(self.values, name or "tensor")
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = None

    @classmethod
    def _wrap(cls, values, requires_grad):
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        t.name = None
        t.grad = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def numpy(self):
        return self.values

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    __float__ = item

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    """Sums *grad* down to *shape* after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """
    A primitive operation. Subclasses implement *forward* on numpy arrays and
    *backward*, which maps the output gradient to one gradient per input
    (already shaped like the input, or broadcast-compatible with it).
    """

    name = "function"

    def __init__(self, **options):
        self.options = options

    def forward(self, *values):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **options):
        inputs = [as_tensor(t) for t in inputs]
        fn = cls(**options)
        with np.errstate(all="ignore"):
            values = fn.forward(*[t.values for t in inputs])
        values = np.asarray(values, dtype=np.float64)
        _check_finite(values, cls.name)
        requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor._wrap(values, requires_grad)
        tape = active_tape()
        if tape is not None and requires_grad:
            tape.record(fn, inputs, out)
        return out


def _broadcast_shape(name, *values):
    try:
        return np.broadcast_shapes(*[v.shape for v in values])
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"{name}: cannot broadcast shapes {shapes}") from None


class Add(Function):
    name = "add"

    def forward(self, x, y):
        _broadcast_shape(self.name, x, y)
        return x + y

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, x, y):
        _broadcast_shape(self.name, x, y)
        return x - y

    def backward(self, grad):
        return grad, -grad


class Neg(Function):
    name = "neg"

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    name = "multiply"

    def forward(self, x, y):
        _broadcast_shape(self.name, x, y)
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class Div(Function):
    name = "divide"

    def forward(self, x, y):
        _broadcast_shape(self.name, x, y)
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return grad / self.y, -grad * self.x / (self.y * self.y)


class MatMul(Function):
    name = "matmul"

    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        # subgradient at exactly 0 is 0
        return (grad * self.mask,)


class Exp(Function):
    name = "exp"

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Softplus(Function):
    name = "softplus"

    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad):
        return (grad * expit(self.x),)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Square(Function):
    name = "square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (grad * 2.0 * self.x,)


class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.sum(x, axis=self.options.get("axis"))

    def backward(self, grad):
        axis = self.options.get("axis")
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    name = "mean"

    def forward(self, x):
        self.shape = x.shape
        axis = self.options.get("axis")
        self.count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        return np.mean(x, axis=axis)

    def backward(self, grad):
        axis = self.options.get("axis")
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Concatenate(Function):
    name = "concatenate"

    def forward(self, *xs):
        axis = self.options.get("axis", -1)
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError as e:
            raise ShapeError(f"concatenate: {e}") from None
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.options.get("axis", -1)))


class Index(Function):
    name = "index"

    def forward(self, x):
        self.shape = x.shape
        return x[self.options["key"]]

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[self.options["key"]] = grad
        return (out,)


def add(x, y):
    return Add.apply(x, y)


def sub(x, y):
    return Sub.apply(x, y)


def neg(x):
    return Neg.apply(x)


def mul(x, y):
    return Mul.apply(x, y)


def div(x, y):
    return Div.apply(x, y)


def matmul(x, y):
    return MatMul.apply(x, y)


def relu(x):
    return ReLU.apply(x)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def softplus(x):
    return Softplus.apply(x)


def sqrt(x):
    return Sqrt.apply(x)


def square(x):
    return Square.apply(x)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    return Sum.apply(x, axis=axis)


def mean(x, axis=None):
    return Mean.apply(x, axis=axis)


def concatenate(tensors, axis=-1):
    return Concatenate.apply(*tensors, axis=axis)


def index(x, key):
    return Index.apply(x, key=key)


class ComputationTape:
    """
    Ordered record of the primitives applied while the tape is active.

    Use it as a context manager, or through *forward(fn, \\*inputs)* which
    runs *fn* under the tape and remembers its output for *backward()*.
    *input_shapes*, when given, declares the shapes *forward* accepts.
    """

    def __init__(self, input_shapes=None):
        self.input_shapes = None if input_shapes is None else [tuple(s) for s in input_shapes]
        self.nodes = []
        self.output = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, fn, inputs, output):
        self.nodes.append((fn, inputs, output))

    def forward(self, fn, *inputs):
        inputs = [as_tensor(t) for t in inputs]
        if self.input_shapes is not None:
            shapes = [t.shape for t in inputs]
            if shapes != self.input_shapes:
                raise ShapeError(f"tape declared inputs {self.input_shapes}, got {shapes}")
        self.nodes = []
        with self:
            out = as_tensor(fn(*inputs))
        self.output = out
        return out

    def backward(self, output_gradient=None, output=None):
        """
        Propagates *output_gradient* (default: ones, i.e. a scalar loss) from
        *output* (default: the result of the last *forward*) back through the
        tape. Sets *grad* on every leaf that requires it and returns a dict
        mapping those leaves to their gradients.
        """
        output = self.output if output is None else output
        if output is None:
            raise TapeError("backward() called before forward()")
        if not any(node[2] is output for node in self.nodes):
            raise TapeError("output was not produced on this tape")

        if output_gradient is None:
            output_gradient = np.ones(output.shape)
        output_gradient = np.asarray(output_gradient, dtype=np.float64)
        if output_gradient.shape != output.shape:
            raise ShapeError(f"output gradient shape {output_gradient.shape} != output {output.shape}")

        produced = {id(node[2]) for node in self.nodes}
        grads = {id(output): output_gradient}
        leaves = {}
        for fn, inputs, out in reversed(self.nodes):
            grad = grads.pop(id(out), None)
            if grad is None:
                continue
            for t, g in zip(inputs, fn.backward(grad)):
                if not t.requires_grad or g is None:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), t.shape)
                key = id(t)
                grads[key] = grads[key] + g if key in grads else g
                if key not in produced:
                    leaves[key] = t

        result = {}
        for key, t in leaves.items():
            g = grads[key]
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {t!r}")
            t.grad = g
            result[t] = g
        return result


def forward(tape, fn, *inputs):
    """Evaluates *fn* on *inputs*, recording every primitive on *tape*."""
    return tape.forward(fn, *inputs)


def backward(tape, output_gradient=None, output=None):
    return tape.backward(output_gradient, output)


def gradients(tape, params, output=None):
    """Runs *backward* and returns one gradient per entry of *params* (zeros if unused)."""
    found = backward(tape, output=output)
    return [found.get(p, np.zeros(p.shape)) for p in params]


class OptimizerState:
    """
    Adaptive-moment (Adam) optimizer state for a fixed list of parameters.

    Defaults: *lr=1e-3*, *beta1=0.9*, *beta2=0.999*, *eps=1e-8*.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, params, grads):
        return optimizer_step(self, params, grads)

    def state_dict(self):
        state = {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                 "eps": self.eps, "step_count": self.step_count}
        arrays = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            arrays[f"m{i}"] = m
            arrays[f"v{i}"] = v
        return state, arrays

    def load_state_dict(self, state, arrays):
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.step_count = state["step_count"]
        self.m = [np.array(arrays[f"m{i}"]) for i in range(len(self.m))]
        self.v = [np.array(arrays[f"v{i}"]) for i in range(len(self.v))]


def optimizer_step(state, params, grads):
    """
    Applies one Adam update to *params* in place and returns them.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"optimizer tracks {len(state.m)} parameters, got {len(params)} params "
                         f"and {len(grads)} gradients")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {np.shape(g)}, moment {m.shape}")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p.values = p.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def numerical_gradient(loss_fn, params, h=1e-5):
    """
    Central finite differences of the scalar *loss_fn()* with respect to
    every entry of every tensor in *params*.
    """
    result = []
    for p in params:
        g = np.zeros(p.shape)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn())
            flat[i] = old - h
            down = float(loss_fn())
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2.0 * h)
        result.append(g)
    return result


def relative_error(analytic, numeric):
    """Max-norm relative error between two lists of gradient arrays."""
    diff = max(float(np.max(np.abs(a - n))) for a, n in zip(analytic, numeric))
    scale = max(float(np.max(np.abs(n))) for n in numeric)
    return diff / max(scale, 1e-12)


def save_checkpoint(path, params, optimizer=None, metadata=None):
    """
    Writes named parameters (dict name -> Tensor or array) to a numpy
    ``.npz`` container with a versioned JSON header. Optimizer moments are
    stored alongside when *optimizer* is given.
    """
    arrays = {}
    shapes = {}
    for name, value in params.items():
        values = value.values if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        arrays[f"param/{name}"] = values
        shapes[name] = list(values.shape)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "parameters": shapes, "metadata": metadata or {}}
    if optimizer is not None:
        state, moments = optimizer.state_dict()
        header["optimizer"] = state
        for key, value in moments.items():
            arrays[f"optim/{key}"] = value
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """
    Reads a checkpoint written by *save_checkpoint()*. Returns
    ``(params, optimizer_state, metadata)`` where *params* maps names to
    float64 arrays and *optimizer_state* is ``(state, moments)`` or *None*.
    """
    with np.load(path, allow_pickle=False) as data:
        if "header" not in data.files:
            raise ValueError(f"{path}: not an actinf checkpoint (no header)")
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {}
        for name, shape in header["parameters"].items():
            values = np.array(data[f"param/{name}"], dtype=np.float64)
            if list(values.shape) != shape:
                raise ShapeError(f"{path}: parameter {name} has shape {values.shape}, header says {shape}")
            params[name] = values
        optimizer = None
        if "optimizer" in header:
            moments = {key[len("optim/"):]: np.array(data[key])
                       for key in data.files if key.startswith("optim/")}
            optimizer = (header["optimizer"], moments)
    return params, optimizer, header["metadata"]
