"""SGD-with-momentum and Adam, operating on :class:`dfme.nn.DenseNetwork` params."""

from __future__ import annotations

import numpy as np

from typing import Iterable

from dfme.nn import DenseNetwork, NetworkStateError, Param


class Optimizer:
    """Base optimizer over a network or any iterable of :class:`Param`."""

    kind = "base"

    def __init__(self, params: DenseNetwork | Iterable[Param], lr: float):
        if isinstance(params, DenseNetwork):
            params = params.parameters()
        self.lr = float(lr)
        self.params = list(params)

    def _check_grads(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise NetworkStateError(f"parameter {i} has no gradient; run backward first")

    def step(self) -> None:
        self._check_grads()
        self._update()
        for p in self.params:
            p.zero_grad()

    def _update(self) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state_dict(self, state: dict) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with momentum, ``v <- mu*v + g + wd*p``, ``p <- p - lr*v``."""

    kind = "sgd"

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g

    def reset_output_unit(self, unit: int) -> None:
        """Clear accumulator state of one output unit of the last layer."""
        self.velocity[-2][:, unit] = 0.0
        self.velocity[-1][unit] = 0.0

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "velocity": [v.tolist() for v in self.velocity],
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.momentum = state["momentum"]
        self.weight_decay = state["weight_decay"]
        self.velocity = [np.array(v, dtype=np.float64).reshape(p.data.shape)
                         for v, p in zip(state["velocity"], self.params)]


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        # in place with one scratch buffer: generator stacks make these arrays large
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            tmp = np.multiply(g, 1.0 - self.beta1)
            m *= self.beta1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v *= self.beta2
            v += tmp
            # lr * (m / c1) / (sqrt(v / c2) + eps)
            np.divide(v, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            p.data -= tmp

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "t": self.t,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.beta1, self.beta2 = state["betas"]
        self.eps = state["eps"]
        self.t = state["t"]
        shapes = [p.data.shape for p in self.params]
        self.m = [np.array(a, dtype=np.float64).reshape(s) for a, s in zip(state["m"], shapes)]
        self.v = [np.array(a, dtype=np.float64).reshape(s) for a, s in zip(state["v"], shapes)]


def make_optimizer(kind: str, params, lr: float, **kwargs) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr, **kwargs)
    if kind == "adam":
        return Adam(params, lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")
