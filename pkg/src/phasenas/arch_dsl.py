"""Architecture template language: block catalog, parser, serializer and validator.

An architecture is written as a sequence of block calls, one per line or
separated by semicolons::

    ConvK3BNRELU(3,8,1,1)
    ResK3K3(8,16,2,1)      # in, out, stride, repeats
    GAP(16,16,1,1); FC(16,10,1,1)

Detection architectures mark feature taps with an ``@P<k>`` suffix, e.g.
``SCDown(32,64,2,1)@P4``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .resource import ConstraintSet


class Mode(str, Enum):
    CLASSIFICATION = "classification"
    DETECTION = "detection"


class BlockKind(str, Enum):
    ConvK1BNRELU = "ConvK1BNRELU"
    ConvK3BNRELU = "ConvK3BNRELU"
    ConvK5BNRELU = "ConvK5BNRELU"
    ConvK7BNRELU = "ConvK7BNRELU"
    ResK3K3 = "ResK3K3"
    ResK5K5 = "ResK5K5"
    ResK7K7 = "ResK7K7"
    ResK1K3K1 = "ResK1K3K1"
    GAP = "GAP"
    FC = "FC"
    SCDown = "SCDown"
    PSA = "PSA"
    Identity = "Identity"


@dataclass(frozen=True)
class BlockSignature:
    kind: BlockKind
    arity: int
    kernels: tuple[int, ...]
    modes: frozenset[Mode]
    strides: frozenset[int]
    fixed_repeats: bool = False
    same_channels: bool = False
    description: str = ""


_BOTH = frozenset(Mode)
_CLS = frozenset({Mode.CLASSIFICATION})
_DET = frozenset({Mode.DETECTION})
_S12 = frozenset({1, 2})

CATALOG: dict[BlockKind, BlockSignature] = {
    sig.kind: sig
    for sig in (
        BlockSignature(BlockKind.ConvK1BNRELU, 4, (1,), _BOTH, _S12, description="1x1 conv + BN + ReLU"),
        BlockSignature(BlockKind.ConvK3BNRELU, 4, (3,), _BOTH, _S12, description="3x3 conv + BN + ReLU"),
        BlockSignature(BlockKind.ConvK5BNRELU, 4, (5,), _BOTH, _S12, description="5x5 conv + BN + ReLU"),
        BlockSignature(BlockKind.ConvK7BNRELU, 4, (7,), _BOTH, _S12, description="7x7 conv + BN + ReLU"),
        BlockSignature(BlockKind.ResK3K3, 4, (3, 3), _BOTH, _S12, description="residual unit, two 3x3 convs"),
        BlockSignature(BlockKind.ResK5K5, 4, (5, 5), _BOTH, _S12, description="residual unit, two 5x5 convs"),
        BlockSignature(BlockKind.ResK7K7, 4, (7, 7), _BOTH, _S12, description="residual unit, two 7x7 convs"),
        BlockSignature(
            BlockKind.ResK1K3K1, 4, (1, 3, 1), _BOTH, _S12,
            description="bottleneck residual unit, 1x1-3x3-1x1, mid = out/2",
        ),
        BlockSignature(
            BlockKind.GAP, 4, (), _CLS, frozenset({1}), fixed_repeats=True, same_channels=True,
            description="global average pool (head)",
        ),
        BlockSignature(
            BlockKind.FC, 4, (), _CLS, frozenset({1}), fixed_repeats=True,
            description="fully connected classifier (head), out = classes",
        ),
        BlockSignature(
            BlockKind.SCDown, 4, (1, 3), _DET, frozenset({2}), fixed_repeats=True,
            description="1x1 conv then depthwise 3x3 stride-2 conv",
        ),
        BlockSignature(
            BlockKind.PSA, 4, (1, 1), _DET, frozenset({1}), same_channels=True,
            description="channel attention with residual add",
        ),
        BlockSignature(
            BlockKind.Identity, 4, (), _BOTH, _S12, fixed_repeats=True,
            description="parameter-free skip: spatial subsample by stride, zero-pad/truncate channels",
        ),
    )
}

# The searchable body of a classification network; GAP and FC complete the ten.
CLASSIFICATION_BODY = (
    BlockKind.ConvK1BNRELU,
    BlockKind.ConvK3BNRELU,
    BlockKind.ConvK5BNRELU,
    BlockKind.ConvK7BNRELU,
    BlockKind.ResK3K3,
    BlockKind.ResK5K5,
    BlockKind.ResK7K7,
    BlockKind.ResK1K3K1,
)
HEAD = (BlockKind.GAP, BlockKind.FC)
DETECTION_BODY = CLASSIFICATION_BODY + (BlockKind.SCDown, BlockKind.PSA)

TAP_RE = re.compile(r"P[0-9]+", re.ASCII)


def catalog_signature(kind: BlockKind | str) -> BlockSignature:
    return CATALOG[BlockKind(kind)]


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    in_channels: int
    out_channels: int
    stride: int = 1
    repeats: int = 1
    tap: str | None = None

    def to_text(self) -> str:
        text = f"{self.kind.value}({self.in_channels},{self.out_channels},{self.stride},{self.repeats})"
        if self.tap is not None:
            text += f"@{self.tap}"
        return text


@dataclass(frozen=True)
class ArchitectureSpec:
    blocks: tuple[BlockSpec, ...]
    mode: Mode = Mode.CLASSIFICATION
    input_channels: int = 3
    input_resolution: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def num_classes(self) -> int | None:
        if self.mode is Mode.CLASSIFICATION and self.blocks and self.blocks[-1].kind is BlockKind.FC:
            return self.blocks[-1].out_channels
        return None

    @property
    def taps(self) -> list[tuple[int, str]]:
        return [(i, b.tap) for i, b in enumerate(self.blocks) if b.tap is not None]

    def with_blocks(self, blocks: Iterable[BlockSpec]) -> ArchitectureSpec:
        return replace(self, blocks=tuple(blocks))

    def canonical(self) -> str:
        return serialize(self)


class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"line {line}, column {column}: {message}")
        self.message = message
        self.line = line
        self.column = column


class SerializationError(ValueError):
    pass


class ValidationCode(str, Enum):
    ChannelMismatch = "ChannelMismatch"
    UnknownBlock = "UnknownBlock"
    IllegalParameter = "IllegalParameter"
    ModeViolation = "ModeViolation"
    DepthExceeded = "DepthExceeded"
    HeadMissing = "HeadMissing"
    NoTaps = "NoTaps"


WHOLE_ARCHITECTURE = -1


@dataclass(frozen=True)
class ValidationError:
    code: ValidationCode
    position: int
    detail: str = field(default="", compare=False)

    def __str__(self) -> str:
        where = "architecture" if self.position == WHOLE_ARCHITECTURE else f"block {self.position}"
        return f"{self.code.value} at {where}: {self.detail}"


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<comment>\#[^\n]*)
  | (?P<sep>[\n;])
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<int>[0-9]+)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
  | (?P<at>@)
    """,
    re.VERBOSE | re.ASCII,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        column = pos - line_start + 1
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, column)
        kind = m.lastgroup
        assert kind is not None
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, m.group(), line, column))
        if kind == "sep" and m.group() == "\n":
            line += 1
            line_start = m.end()
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]) -> None:
        self.tokens = tokens
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def take(self, kind: str, what: str) -> _Token:
        tok = self.tokens[self.i]
        if tok.kind != kind:
            found = "end of input" if tok.kind == "eof" else repr(tok.text) if tok.kind != "sep" else "end of statement"
            raise ParseError(f"expected {what}, found {found}", tok.line, tok.column)
        self.i += 1
        return tok

    def blocks(self) -> list[BlockSpec]:
        out: list[BlockSpec] = []
        while self.peek().kind != "eof":
            if self.peek().kind == "sep":
                self.i += 1
                continue
            out.append(self.block())
            if self.peek().kind not in ("sep", "eof"):
                tok = self.peek()
                raise ParseError(f"expected end of statement, found {tok.text!r}", tok.line, tok.column)
        return out

    def block(self) -> BlockSpec:
        name = self.take("name", "block name")
        try:
            kind = BlockKind(name.text)
        except ValueError:
            raise ParseError(f"unknown block {name.text!r}", name.line, name.column) from None
        self.take("lparen", "'('")
        args: list[int] = []
        if self.peek().kind != "rparen":
            while True:
                tok = self.peek()
                if tok.kind != "int":
                    found = "end of statement" if tok.kind in ("sep", "eof") else repr(tok.text)
                    raise ParseError(f"expected integer argument, found {found}", tok.line, tok.column)
                self.i += 1
                args.append(int(tok.text))
                if self.peek().kind == "comma":
                    self.i += 1
                    continue
                break
        self.take("rparen", "')'")
        arity = CATALOG[kind].arity
        if len(args) != arity:
            raise ParseError(
                f"wrong arity for {kind.value}: expected {arity} arguments, got {len(args)}",
                name.line,
                name.column,
            )
        tap = None
        if self.peek().kind == "at":
            self.i += 1
            label = self.take("name", "tap label P<k>")
            if not TAP_RE.fullmatch(label.text):
                raise ParseError(f"malformed tap label {label.text!r}", label.line, label.column)
            tap = label.text
        return BlockSpec(kind, args[0], args[1], args[2], args[3], tap)


def parse_architecture(
    text: str,
    mode: Mode | str = Mode.CLASSIFICATION,
    *,
    input_channels: int = 3,
    input_resolution: int = 32,
) -> ArchitectureSpec:
    """Parse DSL source into an (unvalidated) architecture.

    Raises :class:`ParseError` carrying line and column for anything outside
    the grammar, including unknown block names and wrong argument counts.
    """
    if not isinstance(text, str):
        raise TypeError("architecture source must be str")
    parser = _Parser(_tokenize(text))
    blocks = parser.blocks()
    if not blocks:
        raise ParseError("no blocks in architecture", 1, 1)
    return ArchitectureSpec(
        blocks=tuple(blocks),
        mode=Mode(mode),
        input_channels=input_channels,
        input_resolution=input_resolution,
    )


def serialize(arch: ArchitectureSpec) -> str:
    """Canonical text: one block per line, LF endings, trailing newline."""
    if not arch.blocks:
        raise SerializationError("cannot serialize an architecture with no blocks")
    return "".join(b.to_text() + "\n" for b in arch.blocks)


def read_arch_file(path, mode: Mode | str = Mode.CLASSIFICATION, **kwargs) -> ArchitectureSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_architecture(fh.read(), mode, **kwargs)


def write_arch_file(path, arch: ArchitectureSpec) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(arch))


# ---------------------------------------------------------------------------
# validation


def validate(arch: ArchitectureSpec, limits: ConstraintSet | None = None) -> list[ValidationError]:
    """Structural validity check; returns diagnostics, empty when valid.

    Resource budgets (params/FLOPs) are checked separately by
    :func:`phasenas.resource.check`; only the block-count limit is applied here.
    """
    errors: list[ValidationError] = []
    E, C = ValidationError, ValidationCode
    mode = arch.mode
    n = len(arch.blocks)
    if n == 0:
        return [E(C.HeadMissing if mode is Mode.CLASSIFICATION else C.NoTaps, WHOLE_ARCHITECTURE, "no blocks")]

    prev_out = arch.input_channels
    for i, b in enumerate(arch.blocks):
        sig = CATALOG.get(b.kind) if isinstance(b.kind, BlockKind) else None
        if sig is None:
            errors.append(E(C.UnknownBlock, i, f"unknown block kind {b.kind!r}"))
            prev_out = b.out_channels
            continue
        if mode not in sig.modes:
            errors.append(E(C.ModeViolation, i, f"{b.kind.value} not admissible in {mode.value} mode"))
        if b.in_channels < 1 or b.out_channels < 1:
            errors.append(E(C.IllegalParameter, i, "channel counts must be positive"))
        if b.stride not in sig.strides:
            errors.append(E(C.IllegalParameter, i, f"stride {b.stride} not in {sorted(sig.strides)}"))
        if b.repeats < 1 or (sig.fixed_repeats and b.repeats != 1):
            allowed = "1" if sig.fixed_repeats else ">= 1"
            errors.append(E(C.IllegalParameter, i, f"repeats {b.repeats} must be {allowed}"))
        if sig.same_channels and b.in_channels != b.out_channels:
            errors.append(E(C.IllegalParameter, i, f"{b.kind.value} requires in == out"))
        if b.kind in HEAD and mode is Mode.CLASSIFICATION and i < n - 2:
            errors.append(E(C.IllegalParameter, i, f"{b.kind.value} allowed only in the head"))
        if b.tap is not None:
            if mode is not Mode.DETECTION:
                errors.append(E(C.ModeViolation, i, "tap labels are only meaningful in detection mode"))
            elif not TAP_RE.fullmatch(b.tap):
                errors.append(E(C.IllegalParameter, i, f"malformed tap label {b.tap!r}"))
        if b.in_channels != prev_out:
            errors.append(E(C.ChannelMismatch, i, f"expected in={prev_out}, got in={b.in_channels}"))
        prev_out = b.out_channels

    if limits is not None and limits.max_depth is not None and n > limits.max_depth:
        errors.append(E(C.DepthExceeded, WHOLE_ARCHITECTURE, f"{n} blocks > max_depth {limits.max_depth}"))

    if mode is Mode.CLASSIFICATION:
        if n < 2 or arch.blocks[-2].kind is not BlockKind.GAP or arch.blocks[-1].kind is not BlockKind.FC:
            errors.append(E(C.HeadMissing, WHOLE_ARCHITECTURE, "classification architecture must end with GAP, FC"))
    else:
        taps = arch.taps
        if not taps:
            errors.append(E(C.NoTaps, WHOLE_ARCHITECTURE, "detection architecture needs at least one @P tap"))
        seen: set[str] = set()
        for i, label in taps:
            if label in seen:
                errors.append(E(C.IllegalParameter, i, f"duplicate tap label {label}"))
            seen.add(label)
    return errors


def body_blocks(arch: ArchitectureSpec) -> tuple[BlockSpec, ...]:
    """Blocks excluding the classification head."""
    if arch.mode is Mode.CLASSIFICATION and len(arch.blocks) >= 2 and arch.blocks[-2].kind is BlockKind.GAP:
        return arch.blocks[:-2]
    return arch.blocks


def as_detection(arch: ArchitectureSpec, label: str = "P1") -> ArchitectureSpec:
    """Single-tap detection twin of a classification architecture.

    The tap sits on the last body block, i.e. the feature map the
    classification score measures.
    """
    body = list(body_blocks(arch))
    body[-1] = replace(body[-1], tap=label)
    return replace(arch, blocks=tuple(body), mode=Mode.DETECTION)
