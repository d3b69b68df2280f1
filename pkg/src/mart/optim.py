"""Adam optimizer over named parameters."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, ShapeError

__all__ = ["Adam"]


class Adam:
    """Adam with bias correction, one (m, v, t) state triple per parameter.

    Parameters with ``trainable=False`` or without a gradient are skipped;
    their state, if any, is left untouched. ``step`` consumes gradients but
    does not clear them; call ``zero_grad`` before the next backward.
    """

    def __init__(self, params, lr: float = 1e-3, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.state: dict[str, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        for p in self.params:
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.name} {p.data.shape}")
            s = self.state.get(p.name)
            if s is None:
                s = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self.state[p.name] = s
            s["t"] += 1
            m, v, t = s["m"], s["v"], s["t"]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "state": {
                name: {"m": s["m"].copy(), "v": s["v"].copy(), "t": s["t"]}
                for name, s in self.state.items()
            },
        }

    def load_state_dict(self, payload: dict) -> None:
        self.lr = float(payload["lr"])
        self.beta1, self.beta2 = (float(b) for b in payload["betas"])
        self.eps = float(payload["eps"])
        self.state = {
            name: {
                "m": np.array(s["m"], dtype=np.float64),
                "v": np.array(s["v"], dtype=np.float64),
                "t": int(s["t"]),
            }
            for name, s in payload["state"].items()
        }
