"""Shared oracles for the test suite: central finite differences and mock critics."""

import numpy as np

from nfwpo_bitalloc.nn import MlpNet

FD_STEP = 1e-4
KINK_MARGIN = 1e-3


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def near_kink(net: MlpNet, x, margin: float = KINK_MARGIN) -> bool:
    """True if any hidden pre-activation is within ``margin`` of zero."""
    h = np.atleast_2d(np.asarray(x, dtype=float))
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w.T + b
        if act == "relu":
            if np.any(np.abs(z) < margin):
                return True
            h = np.maximum(z, 0.0)
    return False


def fd_input_grad(net: MlpNet, x, k: int = 0, h: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (net(x + e)[k] - net(x - e)[k]) / (2 * h)
    return g


def fd_param_grad(net: MlpNet, loss, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. every parameter, flattened in layer order."""
    out = []
    for p in net.parameters():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            out.append((up - down) / (2 * h))
    return np.array(out)


def abs_critic_net(state_dim: int, center_delta: float = 0.0, slope: float = 0.01) -> MlpNet:
    """Critic network computing ``-slope * |delta - center|`` for any state.

    The action input is delta / 10, so the hidden units read ``10 * a_in``.
    """
    net = MlpNet((state_dim + 1, 2, 1))
    net.weights[0][:, -1] = [10.0, -10.0]
    net.biases[0][:] = [-center_delta, center_delta]
    net.weights[1][:] = -slope
    return net


def linear_critic_net(state_dim: int, slope: float) -> MlpNet:
    """Critic network computing ``slope * delta`` (no hidden layer)."""
    net = MlpNet((state_dim + 1, 1))
    net.weights[0][0, -1] = 10.0 * slope
    return net


def trapezoid_bd(anchor, test, n=200_001):
    """Second implementation: lstsq cubic fit, dense trapezoid integration."""

    def fit(points):
        q = np.array([p[1] for p in points])
        r = np.log10([p[0] for p in points])
        v = np.vander(q, 4)
        coef, *_ = np.linalg.lstsq(v, r, rcond=None)
        return q, coef

    qa, ca = fit(anchor)
    qt, ct = fit(test)
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    x = np.linspace(lo, hi, n)
    diff = np.vander(x, 4) @ ct - np.vander(x, 4) @ ca
    mean = np.sum((diff[1:] + diff[:-1]) * np.diff(x)) / 2.0 / (hi - lo)
    return 100.0 * (10.0**mean - 1.0)
