"""Dense feed-forward networks with exact backprop, Adam and soft target updates.

Everything is plain numpy in float64. A network is a list of layers; the
hidden layers use a rectifier, the output layer is either the identity or a
scaled ``tanh`` squash (used by the actor to bound delta-QP outputs).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "tanh")


class ShapeError(ValueError):
    """Input or parameter shapes do not match the network."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced a non-finite value."""


@dataclass
class GradRecord:
    """Gradients for every parameter of an :class:`MlpNet`, plus the loss."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float = 0.0

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class MlpNet:
    """Multi-layer perceptron.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output, e.g. ``(11, 128, 128, 1)``.
    output_activation : {"identity", "tanh"}
        Activation of the last layer. ``tanh`` outputs are multiplied by
        ``output_scale``.
    output_scale : float
        Multiplier applied after the output activation.
    rng : numpy Generator, optional
        Source of the uniform fan-in initialisation. ``None`` leaves every
        parameter at zero.
    final_init : float
        Half-width of the uniform initialisation of the output layer.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        output_activation: str = "identity",
        output_scale: float = 1.0,
        rng: np.random.Generator | None = None,
        final_init: float = 3e-3,
    ):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"layer sizes must be >= 2 positive ints, got {sizes}")
        if output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {output_activation!r}")
        self.sizes = sizes
        self.activations = ["relu"] * (len(sizes) - 2) + [output_activation]
        self.output_scale = float(output_scale)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(sizes) - 1
        for k in range(n_layers):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            if rng is None:
                w = np.zeros((fan_out, fan_in))
                b = np.zeros(fan_out)
            else:
                lim = final_init if k == n_layers - 1 else 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
                b = rng.uniform(-lim, lim, size=fan_out)
            self.weights.append(w)
            self.biases.append(b)

    # ------------------------------------------------------------------ shape
    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def copy(self) -> "MlpNet":
        return copy.deepcopy(self)

    def same_architecture(self, other: "MlpNet") -> bool:
        return (
            self.sizes == other.sizes
            and self.activations == other.activations
            and self.output_scale == other.output_scale
        )

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    # --------------------------------------------------------------- forward
    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_inputs:
            raise ShapeError(f"expected input width {self.n_inputs}, got shape {x.shape}")
        return x, single

    def _forward_cache(self, x: np.ndarray):
        pre, post = [], [x]
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            if act == "relu":
                h = np.maximum(z, 0.0)
            elif act == "tanh":
                h = np.tanh(z) * self.output_scale
            else:
                h = z * self.output_scale if self.output_scale != 1.0 else z
            pre.append(z)
            post.append(h)
        return pre, post

    def forward(self, x) -> np.ndarray:
        """Evaluate the network on one input vector or a ``(batch, n_in)`` array."""
        xb, single = self._as_batch(x)
        _, post = self._forward_cache(xb)
        out = post[-1]
        return out[0] if single else out

    __call__ = forward

    # -------------------------------------------------------------- backward
    def _act_grad(self, k: int, z: np.ndarray) -> np.ndarray:
        act = self.activations[k]
        if act == "relu":
            return (z > 0.0).astype(np.float64)
        if act == "tanh":
            t = np.tanh(z)
            return (1.0 - t * t) * self.output_scale
        return np.full_like(z, self.output_scale)

    def _backward(self, pre, post, dout: np.ndarray, want_params: bool):
        dws, dbs = [None] * len(self.weights), [None] * len(self.weights)
        delta = dout
        for k in range(len(self.weights) - 1, -1, -1):
            dz = delta * self._act_grad(k, pre[k])
            if want_params:
                dws[k] = dz.T @ post[k]
                dbs[k] = dz.sum(axis=0)
            delta = dz @ self.weights[k]
        return delta, dws, dbs

    def input_grad(self, x, output_index: int = 0) -> np.ndarray:
        """Gradient of one output w.r.t. the input, for one or many inputs."""
        xb, single = self._as_batch(x)
        if not 0 <= output_index < self.n_outputs:
            raise ShapeError(f"output index {output_index} out of range")
        pre, post = self._forward_cache(xb)
        dout = np.zeros((xb.shape[0], self.n_outputs))
        dout[:, output_index] = 1.0
        dx, _, _ = self._backward(pre, post, dout, want_params=False)
        if not np.all(np.isfinite(dx)):
            raise NumericError("non-finite input gradient")
        return dx[0] if single else dx

    def param_grad(self, x, loss_grad, loss: float = 0.0) -> GradRecord:
        """Backpropagate ``loss_grad`` (dLoss/dOutput) to every parameter.

        For a batch the per-sample contributions are summed, so a mean loss
        must already carry its ``1/B`` factor in ``loss_grad``.
        """
        xb, single = self._as_batch(x)
        g = np.asarray(loss_grad, dtype=np.float64)
        if single and g.ndim == 1:
            g = g[None, :]
        if g.shape != (xb.shape[0], self.n_outputs):
            raise ShapeError(f"loss gradient shape {g.shape} does not match output")
        pre, post = self._forward_cache(xb)
        _, dws, dbs = self._backward(pre, post, g, want_params=True)
        rec = GradRecord(dws, dbs, float(loss))
        if not rec.is_finite():
            raise NumericError("non-finite parameter gradient")
        return rec

    def forward_backward(self, x, loss_fn):
        """Run forward, call ``loss_fn(out) -> (loss, dloss/dout)``, backprop.

        Returns ``(out, GradRecord)``; avoids a second forward pass.
        """
        xb, _ = self._as_batch(x)
        pre, post = self._forward_cache(xb)
        out = post[-1]
        loss, g = loss_fn(out)
        _, dws, dbs = self._backward(pre, post, g, want_params=True)
        rec = GradRecord(dws, dbs, float(loss))
        if not rec.is_finite():
            raise NumericError("non-finite parameter gradient")
        return out, rec

    def zero_grad_record(self) -> GradRecord:
        return GradRecord(
            [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]
        )


@dataclass
class Adam:
    """Adaptive-moment optimizer state for one network."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: MlpNet, lr: float = 1e-3, **kw) -> "Adam":
        params = net.parameters()
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )

    def step(self, net: MlpNet, grads: GradRecord, lr: float | None = None) -> MlpNet:
        """Apply one bias-corrected Adam update to ``net`` in place."""
        params = net.parameters()
        gs = grads.arrays()
        if len(gs) != len(params) or any(g.shape != p.shape for g, p in zip(gs, params)):
            raise ShapeError("gradient record does not match network")
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, gs, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return net


def soft_update(target: MlpNet, online: MlpNet, tau: float) -> MlpNet:
    """Polyak-average ``online`` into ``target`` in place: (1-tau)*target + tau*online."""
    if not target.same_architecture(online):
        raise ShapeError("soft update between different architectures")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    for pt, po in zip(target.parameters(), online.parameters()):
        pt *= 1.0 - tau
        pt += tau * po
    return target
