"""Adam that honours the network's freeze mask.

Frozen parameter groups are skipped entirely: no value update and no moment
update, so both the parameters and their optimizer state stay bit-identical
until the group is unfrozen. State is keyed by (group, index) and survives
growth because groups are append-only.
"""

from __future__ import annotations

import torch


class MaskedAdam:
    def __init__(self, net, lr: float = 1e-3, betas=(0.0, 0.99), eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict[tuple[str, int], dict] = {}

    def zero_grad(self):
        for group in self.net.parameter_groups().values():
            for p in group:
                p.grad = None

    @torch.no_grad()
    def step(self):
        b1, b2 = self.betas
        for name, group in self.net.parameter_groups().items():
            if name in self.net.frozen:
                continue
            for i, p in enumerate(group):
                if p.grad is None:
                    continue
                key = (name, i)
                st = self.state.get(key)
                if st is None:
                    st = {"step": 0,
                          "m": torch.zeros_like(p),
                          "v": torch.zeros_like(p)}
                    self.state[key] = st
                st["step"] += 1
                st["m"].mul_(b1).add_(p.grad, alpha=1 - b1)
                st["v"].mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
                m_hat = st["m"] / (1 - b1 ** st["step"])
                v_hat = st["v"] / (1 - b2 ** st["step"])
                p.addcdiv_(m_hat, v_hat.sqrt().add_(self.eps), value=-self.lr)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "betas": tuple(self.betas), "eps": self.eps,
            "state": {f"{name}::{i}": {"step": st["step"],
                                       "m": st["m"].clone(),
                                       "v": st["v"].clone()}
                      for (name, i), st in self.state.items()},
        }

    def load_state_dict(self, sd: dict):
        self.lr = sd["lr"]
        self.betas = tuple(sd["betas"])
        self.eps = sd["eps"]
        self.state = {}
        for key, st in sd["state"].items():
            name, i = key.rsplit("::", 1)
            self.state[(name, int(i))] = {"step": st["step"],
                                          "m": st["m"].clone(),
                                          "v": st["v"].clone()}
