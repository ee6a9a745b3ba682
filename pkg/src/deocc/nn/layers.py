"""Parameter containers and the few layer types the models are built from."""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor, conv2d


class Module:
    """Base class; children discovered from instance attributes (sorted by name)."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in sorted(vars(self)):
            val = getattr(self, name)
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.params().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)) and val and all(isinstance(m, Module) for m in val):
                for i, m in enumerate(val):
                    for k, v in m.params().items():
                        out[f"{name}.{i}.{k}"] = v
        return out

    def all_tensors(self) -> dict[str, Tensor]:
        """Like params() but including frozen (requires_grad=False) tensors."""
        out: dict[str, Tensor] = {}
        for name in sorted(vars(self)):
            val = getattr(self, name)
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.all_tensors().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)) and val and all(isinstance(m, Module) for m in val):
                for i, m in enumerate(val):
                    for k, v in m.all_tensors().items():
                        out[f"{name}.{i}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for t in self.all_tensors().values():
            t.grad = None

    def freeze(self) -> None:
        for t in self.all_tensors().values():
            t.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.all_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = self.all_tensors()
        if set(state) != set(tensors):
            missing = set(tensors) - set(state)
            extra = set(state) - set(tensors)
            raise ValueError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in tensors.items():
            if t.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {t.data.shape} vs {state[k].shape}")
            t.data = np.asarray(state[k], dtype=np.float64).copy()

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.all_tensors()):
            h.update(k.encode())
            h.update(self.all_tensors()[k].data.tobytes())
        return h.hexdigest()


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1,
                 pad: int | None = None, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            scale = np.sqrt(2.0 / (cin * k * k))
            w = rng.normal(0.0, scale, size=(cout, cin, k, k))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((cin, cout))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, cout))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Adam:
    """Adam with serializable state so training can resume bitwise."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * (g * g)
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "lr": self.lr,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.m = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state["v"].items()}
