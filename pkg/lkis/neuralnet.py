"""Multi-layer perceptrons with parametric ReLU and batch normalization.

Each hidden layer computes affine -> batch norm -> PReLU; the output layer is
affine only. Forward and backward passes are written out explicitly in numpy,
in float64, with the parameters kept in a flat name -> array mapping so the
optimizers and serializers can treat every block uniformly.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ._utils import NonFiniteError, ShapeError, check_document

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
MLP_FORMAT = "lkis.mlp"
MLP_VERSION = 1


class NetMode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def hidden_sizes(n_in: int, n_out: int, depth: int = 1, width: int | None = None) -> tuple[int, ...]:
    """Layer sizes with every hidden layer at the rounded mean of n_in and n_out, or `width`."""
    if depth < 0:
        raise ValueError(f"depth must be non-negative, got {depth}")
    if width is not None and width < 1:
        raise ValueError(f"hidden width must be positive, got {width}")
    mean = width or max(1, math.floor((n_in + n_out) / 2 + 0.5))
    return (n_in, *([mean] * depth), n_out)


@dataclass
class Mlp:
    layer_sizes: tuple[int, ...]
    params: dict[str, np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
            if i < self.n_hidden:
                names += [f"prelu{i}", f"gamma{i}", f"beta{i}"]
        return names

    def n_params(self) -> int:
        return sum(self.params[name].size for name in self.param_names())

    def copy(self) -> "Mlp":
        return Mlp(
            layer_sizes=self.layer_sizes,
            params={k: v.copy() for k, v in self.params.items()},
            running_mean=[m.copy() for m in self.running_mean],
            running_var=[v.copy() for v in self.running_var],
            momentum=self.momentum,
            eps=self.eps,
        )


def mlp_new(layer_sizes, seed: int = 0) -> Mlp:
    """Build an MLP with He-style initialization for PReLU.

    Weights are drawn from N(0, 2 / ((1 + a^2) * fan_in)) with a the initial
    PReLU slope; biases and batch-norm shifts start at zero, scales at one.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ShapeError(f"an MLP needs at least input and output sizes, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ShapeError(f"layer sizes must be positive, got {sizes}")

    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    n_hidden = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = math.sqrt(2.0 / ((1.0 + PRELU_INIT**2) * fan_in))
        params[f"W{i}"] = rng.normal(0.0, std, size=(fan_out, fan_in))
        params[f"b{i}"] = np.zeros(fan_out)
        if i < n_hidden:
            params[f"prelu{i}"] = np.full(1, PRELU_INIT)
            params[f"gamma{i}"] = np.ones(fan_out)
            params[f"beta{i}"] = np.zeros(fan_out)
    return Mlp(
        layer_sizes=sizes,
        params=params,
        running_mean=[np.zeros(s) for s in sizes[1:-1]],
        running_var=[np.ones(s) for s in sizes[1:-1]],
    )


@dataclass
class ForwardCache:
    mode: NetMode
    layer_sizes: tuple[int, ...]
    params: dict[str, np.ndarray]
    inputs: list[np.ndarray] = field(default_factory=list)
    xhat: list[np.ndarray] = field(default_factory=list)
    inv_std: list[np.ndarray] = field(default_factory=list)
    pre_act: list[np.ndarray] = field(default_factory=list)


def forward(net: Mlp, X, mode: NetMode = NetMode.EVAL) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a (batch, n_in) array.

    Train mode normalizes with batch statistics and updates the running
    statistics in place; Eval mode uses the frozen running statistics, so
    every output row depends on its input row only.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ShapeError(f"expected input of shape (batch, {net.n_in}), got {X.shape}")
    if mode is NetMode.TRAIN and X.shape[0] < 2:
        raise ShapeError("train mode needs a batch of at least 2 rows for batch statistics")

    p = net.params
    cache = ForwardCache(mode=mode, layer_sizes=net.layer_sizes, params=p)
    a = X
    for i in range(net.n_hidden):
        cache.inputs.append(a)
        z = a @ p[f"W{i}"].T + p[f"b{i}"]
        if mode is NetMode.TRAIN:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            batch = z.shape[0]
            net.running_mean[i] = (1 - net.momentum) * net.running_mean[i] + net.momentum * mean
            net.running_var[i] = (1 - net.momentum) * net.running_var[i] + net.momentum * var * batch / (batch - 1)
        else:
            mean = net.running_mean[i]
            var = net.running_var[i]
        inv_std = 1.0 / np.sqrt(var + net.eps)
        xhat = (z - mean) * inv_std
        u = p[f"gamma{i}"] * xhat + p[f"beta{i}"]
        a = np.where(u > 0, u, p[f"prelu{i}"][0] * u)

        cache.xhat.append(xhat)
        cache.inv_std.append(inv_std)
        cache.pre_act.append(u)

    last = net.n_hidden
    cache.inputs.append(a)
    return a @ p[f"W{last}"].T + p[f"b{last}"], cache


def backward(net: Mlp, cache: ForwardCache, grad_out) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(output).

    Returns:
        (gradients keyed like net.params, gradient with respect to the input)
    """
    if cache.layer_sizes != net.layer_sizes or cache.params is not net.params:
        raise ShapeError("forward cache was produced by a different network (or before a parameter update)")
    dz = np.asarray(grad_out, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if dz.shape != (batch, net.n_out):
        raise ShapeError(f"grad_out must have shape {(batch, net.n_out)}, got {dz.shape}")

    p = net.params
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(net.n_layers)):
        if i < net.n_hidden:
            u = cache.pre_act[i]
            slope = p[f"prelu{i}"][0]
            neg = u <= 0
            grads[f"prelu{i}"] = np.array([np.sum(dz * u * neg)])
            du = np.where(neg, slope * dz, dz)

            xhat = cache.xhat[i]
            grads[f"gamma{i}"] = np.sum(du * xhat, axis=0)
            grads[f"beta{i}"] = np.sum(du, axis=0)
            dxhat = du * p[f"gamma{i}"]
            if cache.mode is NetMode.TRAIN:
                n = dxhat.shape[0]
                dz = cache.inv_std[i] / n * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
                )
            else:
                dz = dxhat * cache.inv_std[i]

        grads[f"W{i}"] = dz.T @ cache.inputs[i]
        grads[f"b{i}"] = dz.sum(axis=0)
        dz = dz @ p[f"W{i}"]
    return grads, dz


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    KINDS = ("sgd", "sgd-momentum", "adam")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}, expected one of {self.KINDS}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def opt_step(
    state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One optimizer update. Returns new parameter arrays and a new state."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter block {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter block {name!r}", where=name)

    t = state.step + 1
    m = dict(state.m)
    v = dict(state.v)
    new_params = dict(params)
    for name, g in grads.items():
        if state.kind == "sgd":
            new_params[name] = params[name] - state.lr * g
        elif state.kind == "sgd-momentum":
            m[name] = state.momentum * m.get(name, np.zeros_like(g)) + g
            new_params[name] = params[name] - state.lr * m[name]
        else:
            m[name] = state.beta1 * m.get(name, np.zeros_like(g)) + (1 - state.beta1) * g
            v[name] = state.beta2 * v.get(name, np.zeros_like(g)) + (1 - state.beta2) * g * g
            m_hat = m[name] / (1 - state.beta1**t)
            v_hat = v[name] / (1 - state.beta2**t)
            new_params[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)

    new_state = OptimizerState(
        kind=state.kind, lr=state.lr, momentum=state.momentum, beta1=state.beta1,
        beta2=state.beta2, epsilon=state.epsilon, step=t, m=m, v=v,
    )
    return new_params, new_state


def mlp_to_dict(net: Mlp) -> dict[str, Any]:
    return {
        "format": MLP_FORMAT,
        "version": MLP_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "momentum": net.momentum,
        "eps": net.eps,
        "params": [
            {"name": name, "shape": list(net.params[name].shape), "values": net.params[name].ravel().tolist()}
            for name in net.param_names()
        ],
        "running_mean": [m.tolist() for m in net.running_mean],
        "running_var": [v.tolist() for v in net.running_var],
    }


def mlp_from_dict(doc: dict[str, Any]) -> Mlp:
    check_document(doc, MLP_FORMAT, MLP_VERSION)
    net = mlp_new(doc["layer_sizes"])
    blocks = {b["name"]: b for b in doc["params"]}
    if list(blocks) != net.param_names():
        raise ShapeError(f"parameter blocks {list(blocks)} do not match layer sizes {net.layer_sizes}")
    for name in net.param_names():
        values = np.asarray(blocks[name]["values"], dtype=np.float64)
        shape = tuple(blocks[name]["shape"])
        if shape != net.params[name].shape or values.size != math.prod(shape):
            raise ShapeError(f"parameter {name!r} has shape {shape}, expected {net.params[name].shape}")
        net.params[name] = values.reshape(shape)
    if len(doc["running_mean"]) != net.n_hidden or len(doc["running_var"]) != net.n_hidden:
        raise ShapeError(f"expected running statistics for {net.n_hidden} hidden layers")
    net.running_mean = [np.asarray(m, dtype=np.float64) for m in doc["running_mean"]]
    net.running_var = [np.asarray(v, dtype=np.float64) for v in doc["running_var"]]
    for i, size in enumerate(net.layer_sizes[1:-1]):
        if net.running_mean[i].shape != (size,) or net.running_var[i].shape != (size,):
            raise ShapeError(f"running statistics of hidden layer {i} do not have size {size}")
        if np.any(net.running_var[i] < 0):
            raise ValueError(f"running variance of hidden layer {i} is negative")
    net.momentum = float(doc["momentum"])
    net.eps = float(doc["eps"])
    return net
