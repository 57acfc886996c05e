"""Adam minimisation on flat parameter vectors, plus a finite-difference oracle."""
from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Non-finite energy or gradient during optimisation."""

    def __init__(self, msg, step):
        super().__init__(f"{msg} at step {step}")
        self.step = step


@dataclasses.dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_steps: int = 500
    convergence_tol: float = 1e-6
    window: int = 10
    lr_decay: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def replace(self, **kw) -> "AdamConfig":
        return dataclasses.replace(self, **kw)


@dataclasses.dataclass
class OptimizeResult:
    x: np.ndarray
    trace: np.ndarray
    n_steps: int
    converged: bool


def adam_minimize(objective: Callable, x0, config: AdamConfig = AdamConfig(),
                  scale=None, callback: Optional[Callable] = None) -> OptimizeResult:
    """Minimise ``objective(x) -> (value, grad)`` with Adam.

    ``scale`` (scalar or per-coordinate) sets the unit in which steps are taken:
    Adam updates ``u = x / scale``, so a learning rate is a step size in those
    units. ``callback(step, x)`` runs before each evaluation; returning True
    signals that the objective changed (e.g. refreshed correspondences), which
    restarts the convergence window.

    With ``lr_decay < 1`` the learning rate decays geometrically so that it
    reaches ``learning_rate * lr_decay`` at ``max_steps``.

    Stops after ``max_steps`` updates or when the relative energy change over the
    last ``window`` steps drops below ``convergence_tol``. The trace holds the
    energy evaluated before every update (and one final evaluation).
    """
    x = np.array(x0, dtype=np.float64, copy=True).reshape(-1)
    scale = np.ones_like(x) if scale is None else np.broadcast_to(
        np.asarray(scale, dtype=np.float64), x.shape).copy()
    u = x / scale
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    b1, b2 = config.beta1, config.beta2
    trace = []
    window_start = 0
    converged = False
    step = 0
    while True:
        x = u * scale
        if callback is not None and callback(step, x):
            window_start = len(trace)
        value, grad = objective(x)
        grad = np.asarray(grad, dtype=np.float64).reshape(-1)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise ConvergenceError("non-finite energy or gradient", step)
        trace.append(float(value))
        n = len(trace) - window_start
        if n > config.window:
            old = trace[-1 - config.window]
            if abs(old - value) <= config.convergence_tol * max(abs(old), 1e-300):
                converged = True
                break
        if step >= config.max_steps:
            break
        g = grad * scale
        step += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** step)
        vhat = v / (1 - b2 ** step)
        lr = config.learning_rate * config.lr_decay ** ((step - 1) / max(config.max_steps, 1))
        u = u - lr * mhat / (np.sqrt(vhat) + config.epsilon)
    logger.debug("adam: %d steps, energy %.6g -> %.6g", step, trace[0], trace[-1])
    return OptimizeResult(u * scale, np.asarray(trace), step, converged)


def finite_difference_gradient(objective: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar ``objective(x)``."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = objective(x)
        flat[i] = orig - h
        fm = objective(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


class ParamPacker:
    """Flatten named arrays into one vector (and back), with per-block units."""

    def __init__(self, arrays: dict, units: Optional[dict] = None):
        self.names = list(arrays)
        self.shapes = {n: np.shape(arrays[n]) for n in self.names}
        self.sizes = {n: int(np.prod(self.shapes[n])) for n in self.names}
        units = units or {}
        self.scale = np.concatenate([np.full(self.sizes[n], float(units.get(n, 1.0)))
                                     for n in self.names])

    def pack(self, arrays: dict) -> np.ndarray:
        return np.concatenate([np.asarray(arrays[n], dtype=np.float64).reshape(-1)
                               for n in self.names])

    def unpack(self, x: np.ndarray) -> dict:
        out, i = {}, 0
        for n in self.names:
            out[n] = x[i:i + self.sizes[n]].reshape(self.shapes[n])
            i += self.sizes[n]
        return out
