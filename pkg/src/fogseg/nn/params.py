"""
Parameter registry
------------------

Every learnable tensor lives in a ``ParamRegistry`` under a canonical dotted name
(``rgb_encoder.down0.conv.weight``). The insertion order of construction is the iteration
order, which makes initialization, checkpoints and parameter counts deterministic.

Batch-norm running statistics are stored alongside as non-learnable buffers.
"""

from typing import Dict, Iterator, List, Literal, Tuple, Union

import numpy as np

from ..core.tensor import DEFAULT_DTYPE, Tensor
from ..errors import CheckpointError, ConfigError

ParamKind = Literal['weight', 'bias', 'gamma', 'beta', 'scalar']
InitScheme = Literal['kaiming_uniform', 'gan_normal']


class ParamRegistry:
    """Ordered map of dotted name -> Tensor (requires_grad) plus named buffers."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._meta: Dict[str, Tuple[str, int]] = {}
        self._buffers: Dict[str, np.ndarray] = {}

    # ---------------------------------------------------------------- registration

    def add(self, name: str, shape: Tuple[int, ...], kind: ParamKind = 'weight',
            fan_in: int = 1) -> Tensor:
        if name in self._params or name in self._buffers:
            raise ConfigError(f"duplicate parameter name '{name}'")
        tensor = Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=True)
        self._params[name] = tensor
        self._meta[name] = (kind, max(int(fan_in), 1))
        return tensor

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self._params or name in self._buffers:
            raise ConfigError(f"duplicate buffer name '{name}'")
        self._buffers[name] = np.array(value, dtype=DEFAULT_DTYPE)

    # ---------------------------------------------------------------- access

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def kind(self, name: str) -> str:
        return self._meta[name][0]

    def fan_in(self, name: str) -> int:
        return self._meta[name][1]

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def buffer_items(self) -> List[Tuple[str, np.ndarray]]:
        return list(self._buffers.items())

    def with_prefix(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if n == prefix or n.startswith(prefix + '.')]

    # ---------------------------------------------------------------- bulk operations

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def to_dtype(self, dtype) -> 'ParamRegistry':
        """Convert every parameter and buffer (gradient checks run in float64)."""
        for tensor in self._params.values():
            tensor.data = tensor.data.astype(dtype)
            tensor.grad = None
        for name, value in self._buffers.items():
            self._buffers[name] = value.astype(dtype)
        return self

    def state(self) -> Dict[str, np.ndarray]:
        """Parameters then buffers, each in insertion order."""
        state = {name: t.data for name, t in self._params.items()}
        state.update(self._buffers)
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy ``state`` into the registry. Names must match exactly and shapes must agree.

        Raises:
            CheckpointError: Missing, unexpected or mis-shaped entries
        """
        expected = list(self._params) + list(self._buffers)
        missing = [n for n in expected if n not in state]
        unexpected = [n for n in state if n not in self._params and n not in self._buffers]
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names do not match the registry: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, value in state.items():
            target = self._params[name].data if name in self._params else self._buffers[name]
            if tuple(value.shape) != target.shape:
                raise CheckpointError(f"shape mismatch for '{name}': {target.shape} vs {tuple(value.shape)}")
        for name, value in state.items():
            if name in self._params:
                self._params[name].data = np.array(value, dtype=self._params[name].dtype)
            else:
                np.copyto(self._buffers[name], value)

    @classmethod
    def merged(cls, *registries: 'ParamRegistry') -> 'ParamRegistry':
        """A registry view sharing the tensors and buffers of ``registries``."""
        combined = cls()
        for registry in registries:
            for name, tensor in registry._params.items():
                if name in combined._params:
                    raise ConfigError(f"duplicate parameter name '{name}'")
                combined._params[name] = tensor
                combined._meta[name] = registry._meta[name]
            for name, buf in registry._buffers.items():
                combined._buffers[name] = buf
        return combined

# ----------------------------------------------------------------------------------------------------------


def param_count(registry: ParamRegistry) -> int:
    """Total number of learnable scalars."""
    return int(sum(t.size for _, t in registry.items()))


def init_params(registry: ParamRegistry, scheme: InitScheme = 'kaiming_uniform', seed: int = 0,
                prefix: Union[str, Tuple[str, ...], None] = None) -> None:
    """
    Initialize parameters in registry order from a single seeded generator.

    ``kaiming_uniform`` draws weights from U(-b, b) with b = sqrt(6 / fan_in);
    ``gan_normal`` draws them from N(0, 0.02). Gammas become 1, betas, biases and scalars 0;
    running statistics are reset to mean 0 / variance 1.
    """
    if scheme not in ('kaiming_uniform', 'gan_normal'):
        raise ConfigError(f"unknown init scheme '{scheme}'")
    rng = np.random.default_rng(seed)
    prefixes = (prefix,) if isinstance(prefix, str) else prefix

    def selected(name: str) -> bool:
        return prefixes is None or any(name == p or name.startswith(p + '.') for p in prefixes)

    items = [(n, t) for n, t in registry.items() if selected(n)]
    for name, tensor in items:
        kind = registry.kind(name)
        if kind == 'weight':
            if scheme == 'kaiming_uniform':
                bound = np.sqrt(6.0 / registry.fan_in(name))
                values = rng.uniform(-bound, bound, size=tensor.shape)
            else:
                values = rng.normal(0.0, 0.02, size=tensor.shape)
        elif kind == 'gamma':
            values = np.ones(tensor.shape)
        else:
            values = np.zeros(tensor.shape)
        tensor.data = values.astype(tensor.dtype)
        tensor.grad = None
    for name, buf in registry.buffer_items():
        if not selected(name):
            continue
        buf[...] = 1.0 if name.endswith('running_var') else 0.0
