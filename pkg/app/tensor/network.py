"""Stateful layer wrappers and block-structured networks."""

from __future__ import annotations

from typing import Any, Dict, Iterator, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .layers import BackwardError, LayerSpec, init_params, layer_backward, layer_forward
from .params import ParamSet


class Block(Protocol):
    def forward(self, x: np.ndarray, training: bool = False, record: bool = True) -> np.ndarray: ...

    def backward(self, dout: np.ndarray) -> np.ndarray: ...

    def param_groups(self) -> List[Tuple[str, ParamSet]]: ...

    def layers(self) -> Iterator["Layer"]: ...


class Layer:
    """One :class:`LayerSpec` bound to its :class:`ParamSet` and saved activations."""

    def __init__(
        self,
        spec: LayerSpec,
        params: Optional[ParamSet] = None,
        *,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        if params is None:
            params = init_params(spec, rng if rng is not None else np.random.default_rng(0))
        self.spec = spec
        self.params = params
        self.track_stats = True
        self._cache: Any = None

    def __repr__(self) -> str:
        return f"Layer({self.spec.kind}, {dict(self.spec.hyperparams)}, frozen={self.params.frozen})"

    @property
    def has_trainable(self) -> bool:
        return not self.params.frozen and bool(self.params.trainable_names())

    def forward(self, x: np.ndarray, training: bool = False, record: bool = True) -> np.ndarray:
        out, cache = layer_forward(self.spec, self.params, x, training=training and self.track_stats)
        self._cache = cache if record else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise BackwardError(f"{self.spec.kind}: backward called without a recorded forward pass")
        need = self.has_trainable
        dx, grads = layer_backward(self.spec, self._cache, dout, need_param_grads=need)
        if need:
            for name, grad in grads.items():
                self.params.set_grad(name, grad)
        self._cache = None
        return dx

    def param_groups(self) -> List[Tuple[str, ParamSet]]:
        return [("", self.params)] if len(self.params) else []

    def layers(self) -> Iterator["Layer"]:
        yield self


def _qualify(prefix: str, name: str) -> str:
    if not name:
        return prefix
    return f"{prefix}.{name}" if prefix else name


class Sequential:
    """Ordered composition of blocks (a cell, an adapter chain, a head)."""

    def __init__(self, blocks: Sequence[Block]) -> None:
        self.blocks: List[Block] = list(blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def forward(self, x: np.ndarray, training: bool = False, record: bool = True) -> np.ndarray:
        for block in self.blocks:
            x = block.forward(x, training, record)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for block in reversed(self.blocks):
            dout = block.backward(dout)
        return dout

    def param_groups(self) -> List[Tuple[str, ParamSet]]:
        groups: List[Tuple[str, ParamSet]] = []
        for index, block in enumerate(self.blocks):
            groups.extend((_qualify(str(index), name), ps) for name, ps in block.param_groups())
        return groups

    def layers(self) -> Iterator[Layer]:
        for block in self.blocks:
            yield from block.layers()


def _has_trainable(block: Block) -> bool:
    return any(not ps.frozen and ps.trainable_names() for _, ps in block.param_groups())


class Network:
    """Named blocks run in order: cells, adapters between them, then the head."""

    def __init__(self, blocks: Sequence[Tuple[str, Block]]) -> None:
        names = [name for name, _ in blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate block names in {names}")
        self.blocks: List[Tuple[str, Block]] = list(blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def names(self) -> List[str]:
        return [name for name, _ in self.blocks]

    def block(self, name: str) -> Block:
        for block_name, block in self.blocks:
            if block_name == name:
                return block
        raise KeyError(name)

    def forward(self, x: np.ndarray, training: bool = False, record: bool = True) -> np.ndarray:
        for _, block in self.blocks:
            x = block.forward(x, training, record)
        return x

    __call__ = forward

    def backward(self, dout: np.ndarray) -> Optional[np.ndarray]:
        """Backpropagate down to the earliest block that holds trainable parameters.

        Returns the input gradient when the walk reaches the network input,
        otherwise ``None``.
        """
        stop = self.frozen_prefix_length()
        for index in range(len(self.blocks) - 1, stop - 1, -1):
            dout = self.blocks[index][1].backward(dout)
        return dout if stop == 0 else None

    def frozen_prefix_length(self) -> int:
        """Number of leading blocks without any trainable parameter."""
        for index, (_, block) in enumerate(self.blocks):
            if _has_trainable(block):
                return index
        return len(self.blocks)

    def slice(self, start: int, stop: Optional[int] = None) -> "Network":
        """View over a contiguous range of blocks (blocks are shared, not copied)."""
        return Network(self.blocks[start:stop])

    def param_groups(self) -> List[Tuple[str, ParamSet]]:
        groups: List[Tuple[str, ParamSet]] = []
        for block_name, block in self.blocks:
            groups.extend((_qualify(block_name, name), ps) for name, ps in block.param_groups())
        return groups

    def trainable_groups(self) -> List[ParamSet]:
        return [ps for _, ps in self.param_groups() if not ps.frozen]

    def layers(self) -> Iterator[Layer]:
        for _, block in self.blocks:
            yield from block.layers()

    def num_trainable(self) -> int:
        return sum(ps.num_trainable() for ps in self.trainable_groups())

    def num_params(self) -> int:
        return sum(ps.num_trainable() for _, ps in self.param_groups())

    def freeze(self) -> None:
        for _, ps in self.param_groups():
            ps.freeze()

    def unfreeze(self) -> None:
        for _, ps in self.param_groups():
            ps.unfreeze()

    def set_track_stats(self, enabled: bool) -> None:
        """When disabled, BN layers normalise with running statistics even while training."""
        for layer in self.layers():
            layer.track_stats = enabled

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {}
        for group_name, ps in self.param_groups():
            for name, value in ps.items():
                state[_qualify(group_name, name)] = value
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise KeyError(f"state mismatch (missing={missing[:5]}, unexpected={unexpected[:5]})")
        for name, target in expected.items():
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise ValueError(f"{name}: shape {source.shape} != {target.shape}")
            target[...] = source
