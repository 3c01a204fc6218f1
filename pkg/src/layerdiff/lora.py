"""Branch-routed low-rank adapters on attention projections.

Each adapted projection gets ``W + alpha * B @ A``. One adapter set serves
every foreground branch; the background branch owns a second, independent set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module
from .rng import DRng
from .tensor import Tensor

BRANCHES = ("fg", "bg")
PROJECTIONS = ("Q", "K", "V")
ALPHA_BOUNDS = (0.0, 64.0)


class LoraAdapter(Module):
    def __init__(self, A, B, alpha: float, branch: str, projection: str):
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}")
        if projection not in PROJECTIONS:
            raise ValueError(f"unknown projection {projection!r}")
        self.A = T.parameter(A)
        self.B = T.parameter(B)
        self.alpha = T.parameter(alpha)
        self.alpha.bounds = ALPHA_BOUNDS
        self.branch = branch
        self.projection = projection
        self._frozen = False

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool):
        self._frozen = bool(flag)
        for p in (self.A, self.B, self.alpha):
            p.frozen = self._frozen

    def num_parameters(self) -> int:
        return self.A.size + self.B.size + 1


def init_adapter(r: int, d: int, rng: DRng, alpha: float = 16.0, branch: str = "fg",
                 projection: str = "Q", d_out: int | None = None, std: float = 0.02) -> LoraAdapter:
    """Gaussian ``A`` (std 0.02), zero ``B`` so the adapter starts as a no-op."""
    d_out = d if d_out is None else d_out
    if r < 1 or r > min(d, d_out):
        raise ValueError(f"invalid rank {r} for extents ({d_out}, {d})")
    A = rng.normal((r, d)) * std
    B = np.zeros((d_out, r))
    return LoraAdapter(A, B, alpha, branch, projection)


def lora_delta(adapter: LoraAdapter) -> Tensor:
    if adapter.B.shape[1] != adapter.A.shape[0]:
        raise ValueError(f"adapter rank mismatch: B {adapter.B.shape}, A {adapter.A.shape}")
    return adapter.alpha * T.matmul(adapter.B, adapter.A)


def apply_projection(x, W_base, adapter: LoraAdapter | None = None) -> Tensor:
    """``x (W_base + dW)^T``; ``adapter=None`` gives the plain projection."""
    W_base = T.as_tensor(W_base)
    if adapter is None:
        return T.matmul(x, T.transpose(W_base))
    if (adapter.B.shape[0], adapter.A.shape[1]) != W_base.shape:
        raise ValueError(f"adapter extents {(adapter.B.shape[0], adapter.A.shape[1])} "
                         f"do not match base weight {W_base.shape}")
    return T.matmul(x, T.transpose(W_base + lora_delta(adapter)))


@dataclass
class BranchRouter(Module):
    """Two adapter sets keyed by site name (e.g. ``"mid.self.Q"``)."""

    fg_adapters: dict = field(default_factory=dict)
    bg_adapters: dict = field(default_factory=dict)

    @classmethod
    def build(cls, sites: dict, rank: int, alpha: float, rng: DRng) -> "BranchRouter":
        """``sites`` maps site name to ``(d_out, d_in)`` of the base weight."""
        router = cls()
        for branch in BRANCHES:
            table = router.adapters(branch)
            for name in sorted(sites):
                d_out, d_in = sites[name]
                table[name] = init_adapter(rank, d_in, rng.spawn("lora", branch, name), alpha,
                                           branch, name.rsplit(".", 1)[-1], d_out=d_out)
        return router

    def adapters(self, branch: str) -> dict:
        if branch == "fg":
            return self.fg_adapters
        if branch == "bg":
            return self.bg_adapters
        raise ValueError(f"unknown branch {branch!r}")

    def get(self, branch: str, site: str) -> LoraAdapter:
        return self.adapters(branch)[site]

    def num_parameters(self) -> int:
        return sum(a.num_parameters() for b in BRANCHES for a in self.adapters(b).values())


def set_frozen(router: BranchRouter, branch: str, flag: bool):
    for adapter in router.adapters(branch).values():
        adapter.frozen = flag
