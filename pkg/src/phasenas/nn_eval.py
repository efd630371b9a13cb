"""Forward passes over randomly initialised networks and the training-free scores.

The engine is plain numpy (float32 activations). Every BatchNorm layer
normalises with the statistics of the batch it sees and records the
per-channel variance of its input; the scores read those variances back.

Score of one repeat, for tap feature maps f^(l):

    x_mix = x1 + gamma * x2
    delta = sum_l || f^(l)(x1) - f^(l)(x_mix) ||_1
    bn    = sum_m log sqrt(mean_c var_m[c] + eps)        (variances of the x1 pass)
    s     = log(delta + eps) + bn

``mean``/``std`` over R repeats are population statistics; ``mean`` ranks.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .arch_dsl import ArchitectureSpec, BlockKind, BlockSpec, Mode, body_blocks, validate

BN_EPS = 1e-5


class InvalidArchitecture(ValueError):
    pass


class NonFiniteScore(ArithmeticError):
    """A repeat produced NaN/inf; callers rank the candidate as -inf."""


@dataclass(frozen=True)
class ScoreConfig:
    gamma_mix: float = 0.01
    epsilon: float = 1e-5
    repeats: int = 8
    batch_size: int = 16
    resolution: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma_mix <= 1.0:
            raise ValueError(f"gamma_mix must lie in [0, 1], got {self.gamma_mix}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.repeats < 1 or self.batch_size < 1 or self.resolution < 1:
            raise ValueError("repeats, batch_size and resolution must be positive")

    @classmethod
    def for_mode(cls, mode: Mode | str, **overrides) -> ScoreConfig:
        if Mode(mode) is Mode.DETECTION:
            overrides.setdefault("resolution", 64)
        return cls(**overrides)

    def to_dict(self) -> dict:
        return {
            "gamma_mix": self.gamma_mix,
            "epsilon": self.epsilon,
            "repeats": self.repeats,
            "batch_size": self.batch_size,
            "resolution": self.resolution,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ScoreReport:
    per_repeat: tuple[float, ...]
    mean: float
    std: float
    config: ScoreConfig

    def to_record(self) -> dict:
        return {
            "mu": self.mean,
            "sigma": self.std,
            "per_repeat": list(self.per_repeat),
            "config": self.config.to_dict(),
        }


@dataclass(frozen=True)
class ForwardTrace:
    taps: list[np.ndarray]
    bn_variances: list[np.ndarray]
    output: np.ndarray | None = None


# ---------------------------------------------------------------------------
# primitive ops


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """'same'-padded cross-correlation, no bias. x: (n,c,h,w), w: (o,c,k,k)."""
    k = w.shape[-1]
    if k == 1:
        xs = x[:, :, ::stride, ::stride]
        out = np.tensordot(w[:, :, 0, 0], xs, axes=([1], [1]))  # (o,n,h,w)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (n,h,w,o)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """w: (c,1,k,k)."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,cij->nchw", win, w[:, 0])


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.float32(0))


def softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# network construction


class _Builder:
    """Allocates weights in block order; one RNG stream per weighted layer."""

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self.layer = 0
        self.params: list[np.ndarray] = []
        self.n_bn = 0

    def _keep(self, a: np.ndarray) -> np.ndarray:
        a.setflags(write=False)
        self.params.append(a)
        return a

    def conv(self, k: int, cin: int, cout: int, groups: int = 1) -> np.ndarray:
        fan_in = k * k * (cin // groups)
        std = np.float32(math.sqrt(2.0 / fan_in))
        w = rng.normal(self.seed, ("weight", self.layer), (cout, cin // groups, k, k)) * std
        self.layer += 1
        return self._keep(w)

    def bn(self, c: int) -> "_BN":
        bn = _BN(self._keep(np.ones(c, np.float32)), self._keep(np.zeros(c, np.float32)), self.n_bn)
        self.n_bn += 1
        return bn

    def linear(self, cin: int, cout: int) -> tuple[np.ndarray, np.ndarray]:
        std = np.float32(math.sqrt(2.0 / cin))
        w = rng.normal(self.seed, ("weight", self.layer), (cout, cin)) * std
        self.layer += 1
        return self._keep(w), self._keep(np.zeros(cout, np.float32))


@dataclass(frozen=True)
class _BN:
    gamma: np.ndarray
    beta: np.ndarray
    index: int

    def __call__(self, x: np.ndarray, var_out: list) -> np.ndarray:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        var_out.append(var)
        inv = (self.gamma / np.sqrt(var + np.float32(BN_EPS))).astype(np.float32)
        return (x - mean[None, :, None, None]) * inv[None, :, None, None] + self.beta[None, :, None, None]


Stage = Callable[[np.ndarray, list], np.ndarray]


def _conv_bn_relu(b: _Builder, k: int, cin: int, cout: int, stride: int) -> Stage:
    w, bn = b.conv(k, cin, cout), b.bn(cout)
    return lambda x, v: relu(bn(conv2d(x, w, stride), v))


def _residual(b: _Builder, kind: BlockKind, cin: int, cout: int, stride: int) -> Stage:
    if kind is BlockKind.ResK1K3K1:
        mid = (cout + 1) // 2
        w1, bn1 = b.conv(1, cin, mid), b.bn(mid)
        w2, bn2 = b.conv(3, mid, mid), b.bn(mid)
        w3, bn3 = b.conv(1, mid, cout), b.bn(cout)

        def main(x, v):
            y = relu(bn1(conv2d(x, w1, stride), v))
            y = relu(bn2(conv2d(y, w2), v))
            return bn3(conv2d(y, w3), v)
    else:
        k = {BlockKind.ResK3K3: 3, BlockKind.ResK5K5: 5, BlockKind.ResK7K7: 7}[kind]
        w1, bn1 = b.conv(k, cin, cout), b.bn(cout)
        w2, bn2 = b.conv(k, cout, cout), b.bn(cout)

        def main(x, v):
            y = relu(bn1(conv2d(x, w1, stride), v))
            return bn2(conv2d(y, w2), v)

    if cin != cout or stride != 1:
        wp, bnp = b.conv(1, cin, cout), b.bn(cout)

        def shortcut(x, v):
            return bnp(conv2d(x, wp, stride), v)
    else:
        def shortcut(x, v):
            return x

    def unit(x, v):
        y = main(x, v)
        return relu(y + shortcut(x, v))

    return unit


def _scdown(b: _Builder, cin: int, cout: int, stride: int) -> Stage:
    w1, bn1 = b.conv(1, cin, cout), b.bn(cout)
    wd, bn2 = b.conv(3, cout, cout, groups=cout), b.bn(cout)

    def stage(x, v):
        y = relu(bn1(conv2d(x, w1), v))
        return bn2(depthwise_conv2d(y, wd, stride), v)

    return stage


def _psa(b: _Builder, c: int) -> Stage:
    wq = b.conv(1, c, c)
    wo, bn = b.conv(1, c, c), b.bn(c)

    def stage(x, v):
        pooled = x.mean(axis=(2, 3))  # (n,c)
        attn = softmax(pooled @ wq[:, :, 0, 0].T, axis=1)
        z = bn(conv2d(x * attn[:, :, None, None], wo), v)
        return x + z

    return stage


def _identity(cin: int, cout: int, stride: int) -> Stage:
    def stage(x, v):
        y = x[:, :, ::stride, ::stride]
        if cout > cin:
            pad = np.zeros((y.shape[0], cout - cin) + y.shape[2:], dtype=y.dtype)
            return np.concatenate([y, pad], axis=1)
        return np.ascontiguousarray(y[:, :cout])

    return stage


def _gap(x, v):
    return x.mean(axis=(2, 3), keepdims=True)


def _block_stages(b: _Builder, block: BlockSpec) -> list[Stage]:
    kind, cin, cout, s = block.kind, block.in_channels, block.out_channels, block.stride
    if kind.value.startswith("ConvK"):
        k = int(kind.value[5])
        return [_conv_bn_relu(b, k, cin if r == 0 else cout, cout, s if r == 0 else 1) for r in range(block.repeats)]
    if kind.value.startswith("Res"):
        return [_residual(b, kind, cin if r == 0 else cout, cout, s if r == 0 else 1) for r in range(block.repeats)]
    if kind is BlockKind.SCDown:
        return [_scdown(b, cin, cout, s)]
    if kind is BlockKind.PSA:
        return [_psa(b, cin) for _ in range(block.repeats)]
    if kind is BlockKind.Identity:
        return [_identity(cin, cout, s)]
    if kind is BlockKind.GAP:
        return [_gap]
    if kind is BlockKind.FC:
        w, bias = b.linear(cin, cout)
        return [lambda x, v: x.reshape(x.shape[0], -1) @ w.T + bias]
    raise InvalidArchitecture(f"no forward semantics for {kind}")


@dataclass(frozen=True)
class NetworkInstance:
    architecture: ArchitectureSpec
    seed: int
    params: tuple[np.ndarray, ...] = field(repr=False)
    n_bn_layers: int
    _blocks: tuple[tuple[Stage, ...], ...] = field(repr=False, compare=False)

    @property
    def num_parameters(self) -> int:
        return sum(int(p.size) for p in self.params)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def build_network(arch: ArchitectureSpec, seed: int = 0) -> NetworkInstance:
    """Instantiate ``arch`` with Kaiming-normal (fan-in, gain sqrt 2) weights.

    BatchNorm affine parameters start at gamma=1, beta=0.
    """
    errors = validate(arch)
    if errors:
        raise InvalidArchitecture("; ".join(str(e) for e in errors))
    b = _Builder(seed)
    blocks = tuple(tuple(_block_stages(b, block)) for block in arch.blocks)
    return NetworkInstance(arch, seed, tuple(b.params), b.n_bn, blocks)


def forward_with_stats(net: NetworkInstance, x: np.ndarray, *, include_head: bool = True) -> ForwardTrace:
    arch = net.architecture
    if x.ndim != 4 or x.shape[1] != arch.input_channels:
        raise ValueError(f"input shape {x.shape} incompatible with {arch.input_channels} input channels")
    x = np.asarray(x, dtype=np.float32)
    n_body = len(body_blocks(arch))
    variances: list[np.ndarray] = []
    taps: list[np.ndarray] = []
    for i, (block, stages) in enumerate(zip(arch.blocks, net._blocks)):
        if i >= n_body and not include_head:
            break
        for stage in stages:
            x = stage(x, variances)
        if arch.mode is Mode.DETECTION:
            if block.tap is not None:
                taps.append(x)
        elif i == n_body - 1:
            taps.append(x)
    return ForwardTrace(taps=taps, bn_variances=variances, output=x if include_head else None)


# ---------------------------------------------------------------------------
# scores


def aggregate(per_repeat: Sequence[float]) -> tuple[float, float]:
    """Population mean and standard deviation."""
    r = len(per_repeat)
    if r == 0:
        raise ValueError("cannot aggregate an empty list of scores")
    mu = sum(per_repeat) / r
    sigma = math.sqrt(sum((s - mu) ** 2 for s in per_repeat) / r)
    return mu, sigma


def bn_term(variances: Sequence[np.ndarray], epsilon: float) -> float:
    return sum(math.log(math.sqrt(float(np.mean(v, dtype=np.float64)) + epsilon)) for v in variances)


def perturbation_delta(taps_a: Sequence[np.ndarray], taps_b: Sequence[np.ndarray]) -> float:
    return sum(
        float(np.abs(a.astype(np.float64) - b.astype(np.float64)).sum()) for a, b in zip(taps_a, taps_b)
    )


def score_inputs(cfg: ScoreConfig, repeat: int, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    shape = (cfg.batch_size, channels, cfg.resolution, cfg.resolution)
    return rng.normal(cfg.seed, ("input", repeat, 1), shape), rng.normal(cfg.seed, ("input", repeat, 2), shape)


def _score(net: NetworkInstance, cfg: ScoreConfig) -> ScoreReport:
    per_repeat = []
    gamma = np.float32(cfg.gamma_mix)
    for i in range(cfg.repeats):
        x1, x2 = score_inputs(cfg, i, net.architecture.input_channels)
        x_mix = x1 + gamma * x2
        t1 = forward_with_stats(net, x1, include_head=False)
        t_mix = forward_with_stats(net, x_mix, include_head=False)
        delta = perturbation_delta(t1.taps, t_mix.taps)
        s = math.log(delta + cfg.epsilon) + bn_term(t1.bn_variances, cfg.epsilon)
        if not math.isfinite(s):
            raise NonFiniteScore(f"repeat {i} produced {s}")
        per_repeat.append(s)
    mu, sigma = aggregate(per_repeat)
    return ScoreReport(tuple(per_repeat), mu, sigma, cfg)


def detection_score(net: NetworkInstance, cfg: ScoreConfig) -> ScoreReport:
    arch = net.architecture
    if arch.mode is not Mode.DETECTION or not arch.taps:
        raise InvalidArchitecture("detection_score needs a detection-mode network with at least one tap")
    return _score(net, cfg)


def classification_score(net: NetworkInstance, cfg: ScoreConfig) -> ScoreReport:
    if net.architecture.mode is not Mode.CLASSIFICATION:
        raise InvalidArchitecture("classification_score needs a classification-mode network")
    return _score(net, cfg)


def score_architecture(arch: ArchitectureSpec, cfg: ScoreConfig) -> ScoreReport:
    """Build with ``cfg.seed`` and apply the score matching the architecture's mode."""
    net = build_network(arch, cfg.seed)
    if arch.mode is Mode.DETECTION:
        return detection_score(net, cfg)
    return classification_score(net, cfg)
