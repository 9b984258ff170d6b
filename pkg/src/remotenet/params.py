"""Named parameter storage and deterministic weight initialization.

A :class:`ParamStore` is an ordered snapshot of every tensor a model owns
(parameters and buffers), keyed by its state-dict name. It is the unit of
checkpointing and the view the gradient checker and parameter-count oracle
work against.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .exceptions import CheckpointError, ConfigError

INIT_STD = 0.02


@dataclass
class ParamEntry:
    shape: tuple[int, ...]
    values: torch.Tensor
    requires_grad: bool


class ParamStore:
    """Ordered name -> tensor map with stable iteration order."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, values: torch.Tensor, requires_grad: bool) -> None:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        values = values.detach().clone()
        if not torch.isfinite(values.float()).all():
            raise ConfigError(f"non-finite values in parameter {name!r}")
        self._entries[name] = ParamEntry(tuple(values.shape), values, requires_grad)

    def names(self) -> list[str]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def items(self):
        return self._entries.items()

    def total_parameters(self) -> int:
        """Number of trainable scalars (buffers excluded)."""
        return sum(e.values.numel() for e in self._entries.values() if e.requires_grad)

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        for name, entry in self.items():
            o = other[name]
            if entry.shape != o.shape or entry.requires_grad != o.requires_grad:
                return False
            if not torch.equal(entry.values, o.values):
                return False
        return True

    @classmethod
    def from_model(cls, model: nn.Module) -> "ParamStore":
        store = cls()
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        for name, tensor in model.state_dict().items():
            store.add(name, tensor, name in trainable)
        return store

    def load_into(self, model: nn.Module) -> None:
        """Copy values into the model; name/shape mismatch raises CheckpointError."""
        state = model.state_dict()
        for name in state:
            if name not in self._entries:
                raise CheckpointError(f"checkpoint is missing entry {name!r}")
        for name, entry in self.items():
            if name not in state:
                raise CheckpointError(f"unexpected checkpoint entry {name!r}")
            target = state[name]
            if tuple(target.shape) != entry.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {entry.shape}, "
                    f"model {tuple(target.shape)}")
        with torch.no_grad():
            for name, entry in self.items():
                state[name].copy_(entry.values.to(state[name].dtype))


def initialize_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic init: trunc-normal(std 0.02, cut at 2 std) conv/linear
    weights, unit norm scales, zero shifts and biases.

    Standalone ``*bias_table`` parameters (positional-attention tables) get the
    same truncated normal. Any parameter not covered by these rules is a bug.
    """
    gen = torch.Generator().manual_seed(int(seed))
    covered: set[int] = set()
    for _, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(module.weight, std=INIT_STD,
                                  a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)
            covered.add(id(module.weight))
            if module.bias is not None:
                nn.init.zeros_(module.bias)
                covered.add(id(module.bias))
        elif isinstance(module, (nn.LayerNorm, nn.BatchNorm2d, nn.GroupNorm)):
            if module.weight is not None:
                nn.init.ones_(module.weight)
                covered.add(id(module.weight))
            if module.bias is not None:
                nn.init.zeros_(module.bias)
                covered.add(id(module.bias))
            if isinstance(module, nn.BatchNorm2d):
                module.reset_running_stats()
    for name, param in model.named_parameters():
        if id(param) in covered:
            continue
        if name.endswith("bias_table"):
            nn.init.trunc_normal_(param, std=INIT_STD,
                                  a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)
        else:
            raise ConfigError(f"no initialization rule for parameter {name!r}")


def init_params(cfg, seed: int) -> ParamStore:
    """Build the network for ``cfg`` and return its initialized ParamStore."""
    from .network import build_network  # config-core must not import network at module scope

    return ParamStore.from_model(build_network(cfg, seed=seed))
