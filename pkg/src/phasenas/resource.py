"""Analytic parameter / FLOPs / depth estimates and the hardware budget check.

FLOPs accounting (per single input image):

* convolution: 2 x MACs, MACs = k*k*(c_in/groups)*c_out*h_out*w_out
* BatchNorm: 2 FLOPs per output element (scale + shift)
* ReLU, residual add, pooling add, channel rescale: 1 FLOP per element
* softmax: 3 FLOPs per element (exp, sum, divide)
* FC: 2*c_in*classes + classes (bias)

Convolutions use "same" padding, so a stride-s layer maps h to ceil(h/s).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .arch_dsl import ArchitectureSpec, BlockKind, BlockSpec, validate

FLOPS_CONVENTION = (
    "FLOPs = 2 x MACs for conv/FC; BN 2/elem; ReLU, add, pool, rescale 1/elem; softmax 3/elem; "
    "per single image at the architecture's input resolution"
)


@dataclass(frozen=True)
class ResourceProfile:
    params: int
    flops: int
    depth: int
    resolution: int

    def to_dict(self) -> dict[str, int]:
        return {"params": self.params, "flops": self.flops, "depth": self.depth, "resolution": self.resolution}


@dataclass(frozen=True)
class ConstraintSet:
    max_params: int | None = None
    max_flops: int | None = None
    max_depth: int | None = None
    min_params: int | None = None

    def __post_init__(self) -> None:
        if self.max_params is not None and self.min_params is not None and self.max_params < self.min_params:
            raise ValueError(f"max_params {self.max_params} < min_params {self.min_params}")

    def to_dict(self) -> dict[str, int | None]:
        return {
            "max_params": self.max_params,
            "max_flops": self.max_flops,
            "max_depth": self.max_depth,
            "min_params": self.min_params,
        }


class ViolationCode(str, Enum):
    ParamsExceeded = "ParamsExceeded"
    ParamsBelowMin = "ParamsBelowMin"
    FlopsExceeded = "FlopsExceeded"
    DepthExceeded = "DepthExceeded"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    bound: str
    actual: int
    limit: int

    def __str__(self) -> str:
        return f"{self.code.value}: {self.bound} limit {self.limit}, actual {self.actual}"


def _down(h: int, stride: int) -> int:
    return (h + stride - 1) // stride


def _conv(k: int, cin: int, cout: int, hw_out: int, groups: int = 1) -> tuple[int, int]:
    weights = k * k * (cin // groups) * cout
    return weights, 2 * weights * hw_out


def _bn(c: int, hw: int) -> tuple[int, int]:
    return 2 * c, 2 * c * hw


class _Tally:
    def __init__(self) -> None:
        self.params = 0
        self.flops = 0

    def add(self, cost: tuple[int, int]) -> None:
        self.params += cost[0]
        self.flops += cost[1]

    def elementwise(self, n: int) -> None:
        self.flops += n


def _residual_unit(t: _Tally, kind: BlockKind, cin: int, cout: int, stride: int, h: int) -> int:
    ho = _down(h, stride)
    hw = ho * ho
    if kind is BlockKind.ResK1K3K1:
        mid = (cout + 1) // 2
        t.add(_conv(1, cin, mid, hw)); t.add(_bn(mid, hw)); t.elementwise(mid * hw)
        t.add(_conv(3, mid, mid, hw)); t.add(_bn(mid, hw)); t.elementwise(mid * hw)
        t.add(_conv(1, mid, cout, hw)); t.add(_bn(cout, hw))
    else:
        k = {BlockKind.ResK3K3: 3, BlockKind.ResK5K5: 5, BlockKind.ResK7K7: 7}[kind]
        t.add(_conv(k, cin, cout, hw)); t.add(_bn(cout, hw)); t.elementwise(cout * hw)
        t.add(_conv(k, cout, cout, hw)); t.add(_bn(cout, hw))
    if cin != cout or stride != 1:
        t.add(_conv(1, cin, cout, hw)); t.add(_bn(cout, hw))
    t.elementwise(cout * hw)  # residual add
    t.elementwise(cout * hw)  # ReLU
    return ho


def block_cost(block: BlockSpec, h: int) -> tuple[int, int, int]:
    """(params, flops, output side) of one block applied to an h x h input."""
    t = _Tally()
    kind, cin, cout, s = block.kind, block.in_channels, block.out_channels, block.stride
    if kind in (BlockKind.ConvK1BNRELU, BlockKind.ConvK3BNRELU, BlockKind.ConvK5BNRELU, BlockKind.ConvK7BNRELU):
        k = int(kind.value[5])
        for r in range(block.repeats):
            h = _down(h, s if r == 0 else 1)
            hw = h * h
            t.add(_conv(k, cin if r == 0 else cout, cout, hw)); t.add(_bn(cout, hw)); t.elementwise(cout * hw)
    elif kind in (BlockKind.ResK3K3, BlockKind.ResK5K5, BlockKind.ResK7K7, BlockKind.ResK1K3K1):
        for r in range(block.repeats):
            h = _residual_unit(t, kind, cin if r == 0 else cout, cout, s if r == 0 else 1, h)
    elif kind is BlockKind.SCDown:
        hw = h * h
        t.add(_conv(1, cin, cout, hw)); t.add(_bn(cout, hw)); t.elementwise(cout * hw)
        h = _down(h, s)
        hw = h * h
        t.add(_conv(3, cout, cout, hw, groups=cout)); t.add(_bn(cout, hw))
    elif kind is BlockKind.PSA:
        c, hw = cin, h * h
        for _ in range(block.repeats):
            t.elementwise(c * hw)  # global average pool
            t.add(_conv(1, c, c, 1))  # attention logits on the pooled vector
            t.elementwise(3 * c)  # softmax over channels
            t.elementwise(c * hw)  # channel-wise rescale
            t.add(_conv(1, c, c, hw)); t.add(_bn(c, hw))
            t.elementwise(c * hw)  # residual add
    elif kind is BlockKind.GAP:
        t.elementwise(cin * h * h)
        h = 1
    elif kind is BlockKind.FC:
        t.add((cin * cout + cout, 2 * cin * cout + cout))
    elif kind is BlockKind.Identity:
        h = _down(h, s)
    else:  # pragma: no cover - exhaustive over BlockKind
        raise ValueError(f"no cost model for {kind}")
    return t.params, t.flops, h


def estimate(arch: ArchitectureSpec, resolution: int | None = None, *, check_valid: bool = True) -> ResourceProfile:
    """Parameter count, FLOPs and expanded depth of ``arch``.

    ``resolution`` overrides ``arch.input_resolution``.
    """
    if check_valid:
        errors = validate(arch)
        if errors:
            raise ValueError(f"cannot estimate an invalid architecture: {errors[0]}")
    res = arch.input_resolution if resolution is None else resolution
    params = flops = depth = 0
    h = res
    for block in arch.blocks:
        p, f, h = block_cost(block, h)
        params += p
        flops += f
        depth += block.repeats
    return ResourceProfile(params=params, flops=flops, depth=depth, resolution=res)


def check(profile: ResourceProfile, limits: ConstraintSet) -> list[Violation]:
    """One violation per breached bound; all bounds are inclusive."""
    out: list[Violation] = []
    if limits.max_params is not None and profile.params > limits.max_params:
        out.append(Violation(ViolationCode.ParamsExceeded, "max_params", profile.params, limits.max_params))
    if limits.min_params is not None and profile.params < limits.min_params:
        out.append(Violation(ViolationCode.ParamsBelowMin, "min_params", profile.params, limits.min_params))
    if limits.max_flops is not None and profile.flops > limits.max_flops:
        out.append(Violation(ViolationCode.FlopsExceeded, "max_flops", profile.flops, limits.max_flops))
    if limits.max_depth is not None and profile.depth > limits.max_depth:
        out.append(Violation(ViolationCode.DepthExceeded, "max_depth", profile.depth, limits.max_depth))
    return out
