"""Adam with bias correction over named parameter collections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch

from .autodiff import ShapeError, Tensor

DEFAULT_LR = 10 ** -4.5


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    def to_tensors(self, prefix: str = "adam.") -> dict[str, Tensor]:
        out = {}
        for name in self.m:
            out[f"{prefix}m.{name}"] = self.m[name]
            out[f"{prefix}v.{name}"] = self.v[name]
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, Tensor], hyper: dict, prefix: str = "adam.") -> "AdamState":
        state = cls(**hyper)
        for key, val in tensors.items():
            if key.startswith(prefix + "m."):
                state.m[key[len(prefix) + 2:]] = val.clone()
            elif key.startswith(prefix + "v."):
                state.v[key[len(prefix) + 2:]] = val.clone()
        return state


@torch.no_grad()
def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, Tensor | None], state: AdamState
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One Adam update, applied in place to ``params``.

    Parameters whose gradient is ``None`` keep their value and moments; the
    step counter still advances once per call.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(
                f"adam_step: gradient for {name!r} has shape {tuple(g.shape)}, "
                f"parameter has {tuple(p.shape)}"
            )
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return params, state


class Adam:
    """Adam bound to a module's named parameters; reads ``.grad`` on step."""

    def __init__(self, module: torch.nn.Module, lr: float = DEFAULT_LR, **kw):
        self.module = module
        self.state = AdamState(lr=lr, **kw)

    def params(self) -> dict[str, Tensor]:
        return dict(self.module.named_parameters())

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = None

    def step(self) -> None:
        params = self.params()
        adam_step(params, {k: p.grad for k, p in params.items()}, self.state)
