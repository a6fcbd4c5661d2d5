"""Progressive generator/critic pair with per-group freeze masks.

Widths are constant across stages (desk-scale nets stay small), weights use
runtime equalized scaling, and the generator's per-resolution output layers
are plain 1x1 convolutions with no nonlinearity, so each output channel is an
exact linear combination of the penultimate feature maps.

Parameter groups ("block0".."blockK", "to_output0".."to_outputK", critic-side
"from_input0.."): the unit of freezing. Frozen groups keep requires_grad off
and are skipped entirely by the optimizer, so their values and optimizer
state are bit-stable for as long as they stay frozen.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import AlreadyAtTarget, DimensionMismatch, NonDyadic, UnknownLayer


def normalize_latent(z: torch.Tensor) -> torch.Tensor:
    return z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class EqConv2d(nn.Module):
    """Conv2d with N(0,1) init and He scaling applied at runtime."""

    def __init__(self, in_ch, out_ch, kernel, padding=0, gain=math.sqrt(2.0)):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = gain / math.sqrt(in_ch * kernel * kernel)
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class EqLinear(nn.Module):
    def __init__(self, in_f, out_f, gain=math.sqrt(2.0)):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_f, in_f))
        self.bias = nn.Parameter(torch.zeros(out_f))
        self.scale = gain / math.sqrt(in_f)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class MinibatchStd(nn.Module):
    """Appends one channel holding the mean over-feature batch std."""

    def forward(self, x):
        stat = torch.sqrt(x.var(dim=0, unbiased=False) + 1e-8).mean()
        return torch.cat([x, stat.expand(x.shape[0], 1, *x.shape[2:])], dim=1)


def _n_stages(base_res: int, target_res: int) -> int:
    if target_res < base_res:
        raise NonDyadic(f"target {target_res} below base {base_res}")
    k = 0
    r = base_res
    while r < target_res:
        r *= 2
        k += 1
    if r != target_res:
        raise NonDyadic(f"target {target_res} is not base {base_res} x 2^k")
    return k + 1


class _GrowableNet(nn.Module):
    """Freeze-mask bookkeeping shared by generator and critic."""

    _ALIASES = ("all", "blocks", "to_outputs", "from_inputs", "final_block",
                "early_blocks")

    def __init__(self):
        super().__init__()
        self.frozen: set[str] = set()

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        raise NotImplementedError

    def group_names(self) -> list[str]:
        return list(self.parameter_groups().keys())

    def resolve_selector(self, selector) -> list[str]:
        names = self.group_names()
        if isinstance(selector, str):
            selector = [selector]
        out: list[str] = []
        for sel in selector:
            if sel == "all":
                out.extend(names)
            elif sel == "blocks":
                out.extend(n for n in names if n.startswith("block"))
            elif sel == "to_outputs":
                out.extend(n for n in names if n.startswith("to_output"))
            elif sel == "from_inputs":
                out.extend(n for n in names if n.startswith("from_input"))
            elif sel == "final_block":
                blocks = [n for n in names if n.startswith("block")]
                out.append(blocks[-1])
            elif sel == "early_blocks":
                blocks = [n for n in names if n.startswith("block")]
                out.extend(blocks[:-1])
            elif sel in names:
                out.append(sel)
            else:
                raise UnknownLayer(f"no parameter group matches {sel!r}")
        return out

    def set_trainable(self, selector, flag: bool) -> dict[str, bool]:
        """Update the freeze mask; returns it as {group: frozen}."""
        groups = self.parameter_groups()
        for name in self.resolve_selector(selector):
            if flag:
                self.frozen.discard(name)
            else:
                self.frozen.add(name)
            for p in groups[name]:
                p.requires_grad_(flag)
        return self.freeze_mask()

    def freeze_mask(self) -> dict[str, bool]:
        return {name: (name in self.frozen) for name in self.group_names()}

    def group_snapshot(self, names=None) -> dict[str, list[torch.Tensor]]:
        groups = self.parameter_groups()
        names = list(groups) if names is None else names
        return {n: [p.detach().clone() for p in groups[n]] for n in names}


class Generator(_GrowableNet):
    def __init__(self, latent_dim: int, base_res: int, target_res: int,
                 out_channels: int, fmap: int = 32):
        super().__init__()
        self.latent_dim = latent_dim
        self.base_res = base_res
        self.target_res = target_res
        self.out_channels = out_channels
        self.fmap = fmap
        self.n_stages_target = _n_stages(base_res, target_res)
        self.alpha = 1.0

        base = nn.ModuleDict({
            "fc": EqLinear(latent_dim, fmap * base_res * base_res),
            "c1": EqConv2d(fmap, fmap, 3, padding=1),
        })
        self.blocks = nn.ModuleList([base])
        self.to_outputs = nn.ModuleList([EqConv2d(fmap, out_channels, 1, gain=1.0)])

    @property
    def n_stages(self) -> int:
        return len(self.blocks)

    @property
    def resolution(self) -> int:
        return self.base_res * 2 ** (self.n_stages - 1)

    def parameter_groups(self):
        groups = {}
        for i, b in enumerate(self.blocks):
            groups[f"block{i}"] = list(b.parameters())
        for i, t in enumerate(self.to_outputs):
            groups[f"to_output{i}"] = list(t.parameters())
        return groups

    def grow(self) -> None:
        """Append one resolution stage; existing weights are untouched, alpha resets."""
        if self.resolution >= self.target_res:
            raise AlreadyAtTarget(f"already at target resolution {self.target_res}")
        block = nn.ModuleDict({
            "c1": EqConv2d(self.fmap, self.fmap, 3, padding=1),
            "c2": EqConv2d(self.fmap, self.fmap, 3, padding=1),
        })
        self.blocks.append(block)
        self.to_outputs.append(EqConv2d(self.fmap, self.out_channels, 1, gain=1.0))
        self.alpha = 0.0

    def _features(self, z: torch.Tensor):
        pn = PixelNorm()
        x = normalize_latent(z)
        base = self.blocks[0]
        x = base["fc"](x).view(-1, self.fmap, self.base_res, self.base_res)
        x = pn(F.leaky_relu(x, 0.2))
        x = pn(F.leaky_relu(base["c1"](x), 0.2))
        prev = x
        for i in range(1, self.n_stages):
            prev = x
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = pn(F.leaky_relu(self.blocks[i]["c1"](x), 0.2))
            x = pn(F.leaky_relu(self.blocks[i]["c2"](x), 0.2))
        return x, prev

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise DimensionMismatch(
                f"latent batch must be (B, {self.latent_dim}), got {tuple(z.shape)}"
            )
        x, prev = self._features(z)
        out = self.to_outputs[-1](x)
        if self.n_stages > 1 and self.alpha < 1.0:
            skip = F.interpolate(self.to_outputs[-2](prev), scale_factor=2,
                                 mode="nearest")
            out = self.alpha * out + (1.0 - self.alpha) * skip
        return out

    def generate(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(z)


class Critic(_GrowableNet):
    """Mirror-image downsampler scoring a batch of images with one scalar each."""

    def __init__(self, in_channels: int, base_res: int, resolution: int,
                 fmap: int = 32, minibatch_std: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.base_res = base_res
        self.fmap = fmap
        self.use_mbstd = minibatch_std
        n = _n_stages(base_res, resolution)

        extra = 1 if minibatch_std else 0
        final = nn.ModuleDict({
            "c1": EqConv2d(fmap + extra, fmap, 3, padding=1),
            "fc": EqLinear(fmap * base_res * base_res, 1, gain=1.0),
        })
        self.blocks = nn.ModuleList([final])
        self.from_inputs = nn.ModuleList([EqConv2d(in_channels, fmap, 1)])
        for _ in range(1, n):
            self._append_stage()
        self.alpha = 1.0
        self.mbstd = MinibatchStd()

    def _append_stage(self):
        self.blocks.append(nn.ModuleDict({
            "c1": EqConv2d(self.fmap, self.fmap, 3, padding=1),
            "c2": EqConv2d(self.fmap, self.fmap, 3, padding=1),
        }))
        self.from_inputs.append(EqConv2d(self.in_channels, self.fmap, 1))

    @property
    def n_stages(self) -> int:
        return len(self.blocks)

    @property
    def resolution(self) -> int:
        return self.base_res * 2 ** (self.n_stages - 1)

    def parameter_groups(self):
        groups = {}
        for i, b in enumerate(self.blocks):
            groups[f"block{i}"] = list(b.parameters())
        for i, t in enumerate(self.from_inputs):
            groups[f"from_input{i}"] = list(t.parameters())
        return groups

    def grow(self) -> None:
        self._append_stage()
        self.alpha = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionMismatch(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        s = self.n_stages - 1
        h = F.leaky_relu(self.from_inputs[s](x), 0.2)
        if s > 0:
            h = F.leaky_relu(self.blocks[s]["c1"](h), 0.2)
            h = F.leaky_relu(self.blocks[s]["c2"](h), 0.2)
            h = F.avg_pool2d(h, 2)
            if self.alpha < 1.0:
                skip = F.leaky_relu(self.from_inputs[s - 1](F.avg_pool2d(x, 2)), 0.2)
                h = self.alpha * h + (1.0 - self.alpha) * skip
            for i in range(s - 1, 0, -1):
                h = F.leaky_relu(self.blocks[i]["c1"](h), 0.2)
                h = F.leaky_relu(self.blocks[i]["c2"](h), 0.2)
                h = F.avg_pool2d(h, 2)
        if self.use_mbstd:
            h = self.mbstd(h)
        h = F.leaky_relu(self.blocks[0]["c1"](h), 0.2)
        return self.blocks[0]["fc"](h.flatten(1))


def build_generator(latent_dim: int, base_res: int, target_res: int,
                    out_channels: int, fmap: int = 32) -> Generator:
    """Generator at its base stage; call grow() (or train progressively) to reach target."""
    return Generator(latent_dim, base_res, target_res, out_channels, fmap=fmap)


def build_critic(in_channels: int, base_res: int, resolution: int,
                 fmap: int = 32, minibatch_std: bool = True) -> Critic:
    return Critic(in_channels, base_res, resolution, fmap=fmap,
                  minibatch_std=minibatch_std)
