"""Layer blocks plus the two parameter-reuse mechanisms the variants need.

Sharing: the same :class:`ParamHandle` wired into several graph sites; all
sites read one storage and their gradients accumulate into one buffer.

Tying: a :class:`TiedView` reinterprets an encoder conv kernel
[Cout,Cin,k,k] as a transposed-conv kernel mapping Cout channels back to
Cin. The view adds zero trainable weight values.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import Tensor, conv2d, conv_transpose2d, default_dtype

_handle_ids = itertools.count(1)


class ParamHandle:
    """Identity of one trainable parameter storage."""

    __slots__ = ("id", "name", "value")

    def __init__(self, name: str, value: Tensor):
        self.id = next(_handle_ids)
        self.name = name
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"ParamHandle({self.name!r}, shape={self.shape})"


class ParamRegistry:
    """Single owner of a model's parameters; seeded, insertion-ordered.

    Registration order defines the bit-reproducible init sequence, so
    builders must register in a deterministic order.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, ParamHandle] = {}

    def register(self, name: str, shape, init: str = "kaiming") -> ParamHandle:
        if name in self._params:
            raise ValueError(f"parameter name already registered: {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "kaiming":
            # uniform with relu gain: bound^2/3 = 2/fan_in
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            bound = float(np.sqrt(6.0 / fan_in))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            raise ValueError(f"unknown init rule {init!r}")
        value = Tensor(data.astype(default_dtype()), requires_grad=True)
        handle = ParamHandle(name, value)
        self._params[name] = handle
        return handle

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> ParamHandle:
        return self._params[name]

    def handles(self) -> list[ParamHandle]:
        return list(self._params.values())

    def named(self) -> dict[str, ParamHandle]:
        return dict(self._params)

    def parameter_count(self) -> int:
        seen = set()
        total = 0
        for h in self._params.values():
            if h.id not in seen:
                seen.add(h.id)
                total += h.size
        return total


def share(handle: ParamHandle) -> ParamHandle:
    """Mark a second wiring site for an existing parameter.

    Returns the identical handle; the point of the call is to make reuse
    explicit at the wiring site.
    """
    return handle


class TiedView:
    """Transposed-orientation reuse of an encoder conv kernel.

    ``weight`` is the source storage itself, so optimizer writes are seen
    through the view and gradients through the view land in source.grad.
    """

    __slots__ = ("source",)

    def __init__(self, source: ParamHandle):
        if source.value.ndim != 4:
            raise ValueError(
                f"tie_transposed needs a 4-D conv kernel, got shape {source.shape}"
            )
        self.source = source

    @property
    def weight(self) -> Tensor:
        return self.source.value

    @property
    def in_channels(self) -> int:
        return self.source.shape[0]

    @property
    def out_channels(self) -> int:
        return self.source.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.source.shape[2]


def tie_transposed(source: ParamHandle) -> TiedView:
    return TiedView(source)


class Conv:
    """One conv layer: k-by-k kernel, same padding by default, optional relu."""

    def __init__(self, reg: ParamRegistry, prefix: str, cin: int, cout: int,
                 k: int = 3, relu: bool = False):
        self.weight = reg.register(f"{prefix}.weight", (cout, cin, k, k), "kaiming")
        self.bias = reg.register(f"{prefix}.bias", (cout,), "zeros")
        self.padding = k // 2
        self.relu = relu

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight.value, self.bias.value, padding=self.padding)
        return out.relu() if self.relu else out


class DoubleConvBlock:
    """Two 3x3 same-padding convs (Cin -> Cout -> Cout), relu after each."""

    def __init__(self, reg: ParamRegistry, prefix: str, cin: int, cout: int):
        self.cin = cin
        self.cout = cout
        self.conv1 = Conv(reg, f"{prefix}.conv1", cin, cout, relu=True)
        self.conv2 = Conv(reg, f"{prefix}.conv2", cout, cout, relu=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class TiedTransposedConv:
    """Transposed conv whose kernel is a TiedView; only the bias is fresh."""

    def __init__(self, reg: ParamRegistry, prefix: str, view: TiedView):
        self.view = view
        self.bias = reg.register(f"{prefix}.bias", (view.out_channels,), "zeros")
        self.padding = view.kernel_size // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(
            x, self.view.weight, self.bias.value, padding=self.padding
        )


def double_conv(block: DoubleConvBlock, x: Tensor) -> Tensor:
    return block(x)
