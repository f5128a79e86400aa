"""The multi-column counting network.

Three rescaled views of a patch enter through dedicated stems; three
fixed-resolution columns process them in phases, exchanging information
through recurring all-pairs fusion after every residual module.  Auxiliary
regression heads tap each phase boundary and a configurable final head
produces the main estimate; the patch count is the weighted combination of
all four.

Column widths and resolutions obey ``C_i = 2*C_{i-1}``, ``R_i = R_{i-1}/2``
relative to the highest-resolution column, whose width is ``base_width`` and
whose resolution is half the input patch side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .layers import (AvgPool2d, BilinearUpsample, ConvBNReLU, Linear, Module,
                     ResidualModule)
from .tensor import Tensor, concat, relu, reshape


@dataclass(frozen=True)
class ColumnSpec:
    """Width and square resolution of one column."""

    index: int
    channels: int
    resolution: int


def column_specs(config: ModelConfig) -> list[ColumnSpec]:
    w, r = config.base_width, config.patch_side // 2
    return [ColumnSpec(i + 1, w << i, r >> i) for i in range(3)]


@dataclass
class HeadOutputs:
    """Per-patch count estimates from the four regression heads.

    Each field is a tensor of shape (batch,); the auxiliary fields are
    constant zeros when the auxiliary heads are disabled.
    """

    aux1: Tensor
    aux2: Tensor
    aux3: Tensor
    final: Tensor

    def as_arrays(self):
        return (self.aux1.data, self.aux2.data, self.aux3.data, self.final.data)


def combine_counts(outputs, weights) -> np.ndarray:
    """Weighted combination of the four head estimates."""
    if isinstance(outputs, HeadOutputs):
        values = outputs.as_arrays()
    else:
        values = outputs
    parts = [np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
             for v in values]
    w, x, y, z = (float(v) for v in weights)
    return w * parts[0] + x * parts[1] + y * parts[2] + z * parts[3]


def _record(trace, name, t: Tensor):
    if trace is not None:
        trace[name] = tuple(t.shape)


# -- stems ----------------------------------------------------------------------


class Stem(Module):
    """Initial conv stack turning one input prior into a column's channels.

    Every stem halves resolution twice (3x3 stride-2 convs); the first stem
    additionally expands to 8x base width with a 1x1 convolution.
    """

    def __init__(self, stem_id: int, config: ModelConfig, dtype, rng):
        super().__init__()
        w = config.base_width
        self.stem_id = stem_id
        self.in_side = {1: 2 * config.patch_side,
                        2: config.patch_side,
                        3: config.patch_side // 2}[stem_id]
        mid = 2 * w
        if stem_id == 1:
            out = 8 * w
            self.convs = [ConvBNReLU(3, mid, 3, 2, 1, dtype, rng),
                          ConvBNReLU(mid, mid, 3, 2, 1, dtype, rng),
                          ConvBNReLU(mid, out, 1, 1, 0, dtype, rng)]
        elif stem_id == 2:
            out = 2 * w
            self.convs = [ConvBNReLU(3, mid, 3, 2, 1, dtype, rng),
                          ConvBNReLU(mid, out, 3, 2, 1, dtype, rng)]
        else:
            out = 4 * w
            self.convs = [ConvBNReLU(3, mid, 3, 2, 1, dtype, rng),
                          ConvBNReLU(mid, out, 3, 2, 1, dtype, rng)]
        self.out_channels = out

    def forward(self, x: Tensor, trace=None) -> Tensor:
        expect = (3, self.in_side, self.in_side)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ValueError(
                f"stem{self.stem_id} expects input (N, 3, {self.in_side}, "
                f"{self.in_side}), got {tuple(x.shape)}")
        for k, conv in enumerate(self.convs):
            x = conv(x)
            _record(trace, f"stem{self.stem_id}.conv{k + 1}", x)
        _record(trace, f"stem{self.stem_id}.out", x)
        return x


# -- fusion ----------------------------------------------------------------------


class FusionTransform(Module):
    """Map column i's feature maps onto column j's width and resolution.

    Identity when i == j; (j - i) stride-2 3x3 convs when moving to a lower
    resolution (widths doubling per step); bilinear upsampling by 2^(i - j)
    followed by a 1x1 channel-adjusting conv when moving higher.
    """

    def __init__(self, specs: Sequence[ColumnSpec], i: int, j: int, dtype, rng):
        super().__init__()
        if not (1 <= i <= len(specs) and 1 <= j <= len(specs)):
            raise ValueError(f"fusion indices must be in 1..{len(specs)}, "
                             f"got ({i}, {j})")
        self.i, self.j = i, j
        self.upsample = None
        self.downs = []
        self.adjust = None
        if i < j:
            self.downs = [ConvBNReLU(specs[t - 1].channels, specs[t].channels,
                                     3, 2, 1, dtype, rng)
                          for t in range(i, j)]
        elif i > j:
            self.upsample = BilinearUpsample(2 ** (i - j))
            self.adjust = ConvBNReLU(specs[i - 1].channels, specs[j - 1].channels,
                                     1, 1, 0, dtype, rng)

    @property
    def num_stride2_convs(self) -> int:
        return len(self.downs)

    def forward(self, x: Tensor) -> Tensor:
        if self.i == self.j:
            return x
        if self.downs:
            for step in self.downs:
                x = step(x)
            return x
        return self.adjust(self.upsample(x))


class FusionBlock(Module):
    """All-pairs exchange: each column receives the sum of every column's
    transformed representation (plain summation, no post-sum activation)."""

    def __init__(self, specs: Sequence[ColumnSpec], active: int, dtype, rng):
        super().__init__()
        self.active = active
        self.transforms = [FusionTransform(specs, i, j, dtype, rng)
                           for j in range(1, active + 1)
                           for i in range(1, active + 1)]

    def _transform(self, i: int, j: int) -> FusionTransform:
        return self.transforms[(j - 1) * self.active + (i - 1)]

    def forward(self, columns: Sequence[Tensor]) -> list[Tensor]:
        if len(columns) != self.active:
            raise ValueError(
                f"fusion expects {self.active} columns, got {len(columns)}")
        fused = []
        for j in range(1, self.active + 1):
            total = None
            for i in range(1, self.active + 1):
                part = self._transform(i, j)(columns[i - 1])
                total = part if total is None else total + part
            fused.append(total)
        return fused


class TransitionBlock(Module):
    """Birth of column k: stride-2 conv of the lowest existing column,
    summed with that column's stem output (when the prior is enabled)."""

    def __init__(self, specs: Sequence[ColumnSpec], k: int, dtype, rng):
        super().__init__()
        self.k = k
        self.conv = ConvBNReLU(specs[k - 2].channels, specs[k - 1].channels,
                               3, 2, 1, dtype, rng)

    def forward(self, lowest: Tensor, ic: Optional[Tensor]) -> Tensor:
        t = self.conv(lowest)
        if ic is None:
            return t
        if tuple(ic.shape) != tuple(t.shape):
            raise ValueError(
                f"transition to column {self.k}: stem output {tuple(ic.shape)} "
                f"does not match transition output {tuple(t.shape)}")
        return t + ic


class PhaseStep(Module):
    """One residual module per active column followed by cross-column fusion."""

    def __init__(self, specs: Sequence[ColumnSpec], active: int, kind: str,
                 dtype, rng):
        super().__init__()
        self.rms = [ResidualModule(specs[i].channels, kind, dtype=dtype, rng=rng)
                    for i in range(active)]
        self.fusion = FusionBlock(specs, active, dtype, rng)

    def forward(self, columns: Sequence[Tensor]) -> list[Tensor]:
        return self.fusion([rm(c) for rm, c in zip(self.rms, columns)])


# -- regression heads -------------------------------------------------------------


class HeadTail(Module):
    """Flatten -> hidden FC (ReLU) -> single-neuron FC."""

    def __init__(self, in_features: int, hidden: int, dtype, rng):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, dtype, rng)
        self.fc2 = Linear(hidden, 1, dtype, rng)

    def forward(self, x: Tensor, trace=None, tag="") -> Tensor:
        n = x.shape[0]
        flat = reshape(x, (n, -1))
        h = relu(self.fc1(flat))
        _record(trace, f"{tag}.fc_hidden", h)
        out = self.fc2(h)
        _record(trace, f"{tag}.fc_out", out)
        return reshape(out, (n,))


class AuxiliaryHead(Module):
    """Phase-end regression head (one stride-2 conv into the shared tail).

    Head 1 consumes the 2x-width column at half resolution and keeps the
    average-pool step; heads 2 and 3 consume the 4x-width column and land
    directly on the fully connected tail.
    """

    def __init__(self, head_id: int, config: ModelConfig, dtype, rng):
        super().__init__()
        w, p = config.base_width, config.patch_side
        hw = 2 * w
        self.head_id = head_id
        if head_id == 1:
            self.conv = ConvBNReLU(2 * w, hw, 3, 2, 1, dtype, rng)
            self.pool = AvgPool2d()
        else:
            self.conv = ConvBNReLU(4 * w, hw, 3, 2, 1, dtype, rng)
            self.pool = None
        side = p // 16
        self.tail = HeadTail(hw * side * side, 32 * w, dtype, rng)

    def forward(self, x: Tensor, trace=None) -> Tensor:
        tag = f"rh{self.head_id}"
        x = self.conv(x)
        _record(trace, f"{tag}.conv", x)
        if self.pool is not None:
            x = self.pool(x)
            _record(trace, f"{tag}.pool", x)
        return self.tail(x, trace, tag)


class FinalHead(Module):
    """Final regression head, five wirings over the phase-3 outputs.

    v1/v2/v3 consume a single column (highest, middle, lowest resolution).
    v4 upsamples the lower columns to the highest resolution and
    concatenates along channels; v5 downsamples progressively and sums into
    the lowest-resolution maps.  All versions share the conv-to-8x8-style
    reduction and fully connected tail.
    """

    def __init__(self, version: str, config: ModelConfig, dtype, rng):
        super().__init__()
        w, p = config.base_width, config.patch_side
        hw = 2 * w
        self.version = version
        self.pool = AvgPool2d()
        side = p // 16
        self.tail = HeadTail(hw * side * side, 32 * w, dtype, rng)
        if version == "v1":
            self.conv1 = ConvBNReLU(w, hw, 3, 2, 1, dtype, rng)
            self.conv2 = ConvBNReLU(hw, hw, 3, 2, 1, dtype, rng)
        elif version == "v2":
            self.open = ConvBNReLU(2 * w, hw, 1, 1, 0, dtype, rng)
            self.conv2 = ConvBNReLU(hw, hw, 3, 2, 1, dtype, rng)
        elif version == "v3":
            self.open = ConvBNReLU(4 * w, hw, 1, 1, 0, dtype, rng)
        elif version == "v4":
            self.up2 = BilinearUpsample(2)
            self.up4 = BilinearUpsample(4)
            self.merge = ConvBNReLU(7 * w, hw, 3, 1, 1, dtype, rng)
            self.conv1 = ConvBNReLU(hw, hw, 3, 2, 1, dtype, rng)
            self.conv2 = ConvBNReLU(hw, hw, 3, 2, 1, dtype, rng)
        elif version == "v5":
            self.down12 = ConvBNReLU(w, 2 * w, 3, 2, 1, dtype, rng)
            self.down23 = ConvBNReLU(2 * w, 4 * w, 3, 2, 1, dtype, rng)
            self.merge = ConvBNReLU(4 * w, hw, 3, 1, 1, dtype, rng)
            self.reduce = ConvBNReLU(hw, hw, 3, 2, 1, dtype, rng)
        else:
            raise ValueError(f"unknown final head version {version!r}")

    def forward(self, columns: Sequence[Tensor], trace=None) -> Tensor:
        tag = f"final.{self.version}"
        v = self.version
        if v == "v1":
            x = self.conv1(columns[0])
            _record(trace, f"{tag}.conv1", x)
            x = self.conv2(x)
            _record(trace, f"{tag}.conv2", x)
            x = self.pool(x)
            _record(trace, f"{tag}.pool", x)
        elif v == "v2":
            x = self.open(columns[1])
            _record(trace, f"{tag}.open", x)
            x = self.conv2(x)
            _record(trace, f"{tag}.conv2", x)
            x = self.pool(x)
            _record(trace, f"{tag}.pool", x)
        elif v == "v3":
            x = self.open(columns[2])
            _record(trace, f"{tag}.open", x)
            x = self.pool(x)
            _record(trace, f"{tag}.pool", x)
        elif v == "v4":
            x = concat([columns[0], self.up2(columns[1]), self.up4(columns[2])],
                       axis=1)
            _record(trace, f"{tag}.concat", x)
            x = self.merge(x)
            _record(trace, f"{tag}.merge", x)
            x = self.conv1(x)
            _record(trace, f"{tag}.conv1", x)
            x = self.conv2(x)
            _record(trace, f"{tag}.conv2", x)
            x = self.pool(x)
            _record(trace, f"{tag}.pool", x)
        else:
            x = columns[1] + self.down12(columns[0])
            _record(trace, f"{tag}.sum2", x)
            x = columns[2] + self.down23(x)
            _record(trace, f"{tag}.sum3", x)
            x = self.merge(x)
            _record(trace, f"{tag}.merge", x)
            x = self.reduce(x)
            _record(trace, f"{tag}.reduce", x)
        return self.tail(x, trace, tag)


# -- the full model ---------------------------------------------------------------


class MRFNet(Module):
    """Stems, phased columns with recurring fusion, and all regression heads."""

    def __init__(self, config: ModelConfig, dtype=np.float32, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        w = config.base_width
        specs = column_specs(config)
        self.specs = specs
        rm1, rm2, rm3 = config.rm_per_phase

        self.stem1 = Stem(1, config, dtype, rng) if config.use_prior_i1 else None
        self.stem2 = Stem(2, config, dtype, rng)
        self.stem3 = Stem(3, config, dtype, rng) if config.use_prior_i3 else None

        self.phase1 = [ResidualModule(8 * w, "two_layer", dtype=dtype, rng=rng)
                       for _ in range(rm1)]
        self.phase1_reduce = ConvBNReLU(8 * w, w, 1, 1, 0, dtype, rng)

        self.transition2 = TransitionBlock(specs, 2, dtype, rng)
        self.phase2 = [PhaseStep(specs, 2, "three_layer", dtype, rng)
                       for _ in range(rm2)]
        self.transition3 = TransitionBlock(specs, 3, dtype, rng)
        self.phase3 = [PhaseStep(specs, 3, "three_layer", dtype, rng)
                       for _ in range(rm3)]

        if config.use_auxiliary_heads:
            self.head1 = AuxiliaryHead(1, config, dtype, rng)
            self.head2 = AuxiliaryHead(2, config, dtype, rng)
            self.head3 = AuxiliaryHead(3, config, dtype, rng)
        else:
            self.head1 = self.head2 = self.head3 = None
        self.final_head = FinalHead(config.head_version, config, dtype, rng)

    # -- prior handling ---------------------------------------------------------

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def forward(self, i1, i2, i3, trace=None) -> HeadOutputs:
        i1, i2, i3 = self._as_tensor(i1), self._as_tensor(i2), self._as_tensor(i3)
        n = i2.shape[0]
        spec1 = self.specs[0]

        if self.stem1 is not None:
            ic1 = self.stem1(i1, trace)
        else:
            ic1 = Tensor(np.zeros(
                (n, 8 * self.config.base_width, spec1.resolution, spec1.resolution),
                dtype=self.dtype))
            _record(trace, "stem1.out", ic1)
        ic2 = self.stem2(i2, trace)
        ic3 = self.stem3(i3, trace) if self.stem3 is not None else None

        x = ic1
        for k, rm in enumerate(self.phase1):
            x = rm(x)
            _record(trace, f"phase1.rm{k + 1}", x)
        x = self.phase1_reduce(x)
        _record(trace, "phase1.col1", x)

        col2 = self.transition2(x, ic2)
        _record(trace, "transition2.col2", col2)
        aux1 = (self.head1(col2, trace) if self.head1 is not None
                else self._zero_counts(n))

        columns = [x, col2]
        for k, step in enumerate(self.phase2):
            columns = step(columns)
            for c, t in enumerate(columns):
                _record(trace, f"phase2.step{k + 1}.col{c + 1}", t)

        col3 = self.transition3(columns[1], ic3)
        _record(trace, "transition3.col3", col3)
        aux2 = (self.head2(col3, trace) if self.head2 is not None
                else self._zero_counts(n))

        columns = [columns[0], columns[1], col3]
        for k, step in enumerate(self.phase3):
            columns = step(columns)
            for c, t in enumerate(columns):
                _record(trace, f"phase3.step{k + 1}.col{c + 1}", t)

        aux3 = (self.head3(columns[2], trace) if self.head3 is not None
                else self._zero_counts(n))
        final = self.final_head(columns, trace)
        return HeadOutputs(aux1, aux2, aux3, final)

    def _zero_counts(self, n: int) -> Tensor:
        return Tensor(np.zeros(n, dtype=self.dtype))

    def shape_trace(self, batch: int = 1) -> dict:
        """Run a dummy forward pass and collect every stage's output shape."""
        p = self.config.patch_side
        trace: dict = {}
        i1 = np.zeros((batch, 3, 2 * p, 2 * p), dtype=self.dtype)
        i2 = np.zeros((batch, 3, p, p), dtype=self.dtype)
        i3 = np.zeros((batch, 3, p // 2, p // 2), dtype=self.dtype)
        mode = self.training
        self.eval()
        try:
            from .tensor import no_grad
            with no_grad():
                self.forward(i1, i2, i3, trace=trace)
        finally:
            self.train(mode)
        return trace

    def head_weights(self):
        return self.config.count_weights
