"""Architecture generators: deterministic mocks and an OpenAI-compatible client.

A generator is any callable ``gen(ctx) -> GeneratorResult``. The controller
never looks inside; it only parses ``result.extracted``.
"""

from __future__ import annotations

import logging
import os
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Protocol, Sequence

from .arch_dsl import (
    CATALOG,
    CLASSIFICATION_BODY,
    DETECTION_BODY,
    ArchitectureSpec,
    BlockKind,
    BlockSpec,
    Mode,
    ParseError,
    body_blocks,
    parse_architecture,
    serialize,
)
from .resource import ConstraintSet, ResourceProfile, check, estimate

log = logging.getLogger(__name__)


class Phase(str, Enum):
    EXPLORATION = "exploration"
    REFINEMENT = "refinement"


@dataclass(frozen=True)
class PoolEntry:
    serialization: str
    score: float


@dataclass(frozen=True)
class BaseInfo:
    serialization: str
    score: float
    profile: ResourceProfile


@dataclass(frozen=True)
class GenerationContext:
    phase: Phase
    mode: Mode = Mode.CLASSIFICATION
    constraints: ConstraintSet = ConstraintSet()
    pool: tuple[PoolEntry, ...] = ()
    base: BaseInfo | None = None
    feedback: tuple[str, ...] = ()
    seed: int = 0
    num_classes: int = 10
    resolution: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "mode", Mode(self.mode))
        if (self.base is not None) != (self.phase is Phase.REFINEMENT):
            raise ValueError("a base architecture is present exactly in the refinement phase")

    def parse(self, text: str) -> ArchitectureSpec:
        return parse_architecture(text, self.mode, input_resolution=self.resolution)


@dataclass(frozen=True)
class GeneratorResult:
    raw_text: str
    extracted: str | None
    attempts: int = 1
    error: str | None = None

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


class Generator(Protocol):
    name: str

    def __call__(self, ctx: GenerationContext) -> GeneratorResult: ...


# ---------------------------------------------------------------------------
# samplers used by the mock generators


class ArchSampler(Protocol):
    def random(self, rnd: random.Random, ctx: GenerationContext) -> ArchitectureSpec: ...

    def mutate(self, arch: ArchitectureSpec, rnd: random.Random, ctx: GenerationContext, *, single: bool) -> ArchitectureSpec: ...


WIDTHS = (8, 16, 24, 32, 48, 64)


def _rechain(body: list[BlockSpec], in_channels: int) -> list[BlockSpec]:
    """Propagate channels so every block's input matches its predecessor."""
    out = []
    prev = in_channels
    for b in body:
        b = replace(b, in_channels=prev)
        if CATALOG[b.kind].same_channels:
            b = replace(b, out_channels=prev)
        out.append(b)
        prev = b.out_channels
    return out


def _with_head(body: list[BlockSpec], ctx: GenerationContext, template: ArchitectureSpec | None = None) -> ArchitectureSpec:
    blocks = list(body)
    if ctx.mode is Mode.CLASSIFICATION:
        c = blocks[-1].out_channels
        classes = template.num_classes if template is not None and template.num_classes else ctx.num_classes
        blocks += [BlockSpec(BlockKind.GAP, c, c), BlockSpec(BlockKind.FC, c, classes)]
    input_channels = template.input_channels if template is not None else 3
    return ArchitectureSpec(tuple(blocks), ctx.mode, input_channels, ctx.resolution)


@dataclass(frozen=True)
class CatalogSampler:
    """Random architectures over the full block catalog of the context's mode."""

    widths: tuple[int, ...] = WIDTHS
    min_body: int = 2
    max_body: int = 6
    max_downsamples: int = 3
    max_repeats: int = 2
    resample_attempts: int = 20

    def kinds(self, mode: Mode) -> tuple[BlockKind, ...]:
        return DETECTION_BODY if mode is Mode.DETECTION else CLASSIFICATION_BODY

    def _fresh(self, rnd: random.Random, ctx: GenerationContext) -> ArchitectureSpec:
        n = rnd.randint(self.min_body, self.max_body)
        body: list[BlockSpec] = []
        prev, downs = 3, 0
        for i in range(n):
            kinds = [k for k in self.kinds(ctx.mode) if not (k is BlockKind.SCDown and downs >= self.max_downsamples)]
            if i == 0:
                kinds = [k for k in kinds if k is not BlockKind.PSA]
            kind = rnd.choice(kinds)
            sig = CATALOG[kind]
            cout = prev if sig.same_channels else rnd.choice(self.widths)
            if sig.strides == {2}:
                stride = 2
            elif 2 in sig.strides and downs < self.max_downsamples and rnd.random() < 0.3:
                stride = 2
            else:
                stride = 1
            downs += stride == 2
            repeats = 1 if sig.fixed_repeats else rnd.randint(1, self.max_repeats)
            body.append(BlockSpec(kind, prev, cout, stride, repeats))
            prev = cout
        if ctx.mode is Mode.DETECTION:
            body = _assign_taps(body, rnd)
        return _with_head(body, ctx)

    def random(self, rnd: random.Random, ctx: GenerationContext) -> ArchitectureSpec:
        arch = self._fresh(rnd, ctx)
        for _ in range(self.resample_attempts - 1):
            if _within(arch, ctx.constraints):
                break
            arch = self._fresh(rnd, ctx)
        return arch

    def mutate(self, arch: ArchitectureSpec, rnd: random.Random, ctx: GenerationContext, *, single: bool) -> ArchitectureSpec:
        """One random edit of the body.

        ``single`` restricts edits to ones that touch exactly one block
        parameter or insert/delete one block (no channel re-chaining).
        """
        body = list(body_blocks(arch))
        ops = ["kind", "stride", "repeats", "insert", "remove"]
        if not single:
            ops.append("width")
        for _ in range(32):
            op = rnd.choice(ops)
            new = getattr(self, f"_op_{op}")(body, rnd, ctx)
            if new is not None and new != body:
                if not single:
                    new = _rechain(new, arch.input_channels)
                if ctx.mode is Mode.DETECTION and not any(b.tap for b in new):
                    new[-1] = replace(new[-1], tap="P3")
                return _with_head(new, ctx, arch)
        return arch

    def _op_kind(self, body, rnd, ctx):
        i = rnd.randrange(len(body))
        b = body[i]
        if b.kind not in self.kinds(ctx.mode):
            return None
        options = []
        for k in self.kinds(ctx.mode):
            sig = CATALOG[k]
            if k is b.kind or b.stride not in sig.strides:
                continue
            if sig.same_channels and b.in_channels != b.out_channels:
                continue
            if sig.fixed_repeats and b.repeats != 1:
                continue
            options.append(k)
        if not options:
            return None
        body = list(body)
        body[i] = replace(b, kind=rnd.choice(options))
        return body

    def _op_stride(self, body, rnd, ctx):
        i = rnd.randrange(len(body))
        b = body[i]
        if CATALOG[b.kind].strides != {1, 2}:
            return None
        downs = sum(x.stride == 2 for x in body)
        if b.stride == 1 and downs >= self.max_downsamples:
            return None
        body = list(body)
        body[i] = replace(b, stride=3 - b.stride)
        return body

    def _op_repeats(self, body, rnd, ctx):
        i = rnd.randrange(len(body))
        b = body[i]
        if CATALOG[b.kind].fixed_repeats:
            return None
        options = [r for r in range(1, self.max_repeats + 2) if r != b.repeats]
        body = list(body)
        body[i] = replace(b, repeats=rnd.choice(options))
        return body

    def _op_insert(self, body, rnd, ctx):
        if len(body) >= self.max_body:
            return None
        i = rnd.randint(1, len(body))
        c = body[i - 1].out_channels
        kind = rnd.choice([k for k in self.kinds(ctx.mode) if 1 in CATALOG[k].strides])
        body = list(body)
        body.insert(i, BlockSpec(kind, c, c, 1, 1))
        return body

    def _op_remove(self, body, rnd, ctx):
        candidates = [i for i, b in enumerate(body) if b.in_channels == b.out_channels and b.tap is None]
        if len(body) <= 1 or not candidates:
            return None
        body = list(body)
        del body[rnd.choice(candidates)]
        return body

    def _op_width(self, body, rnd, ctx):
        i = rnd.randrange(len(body))
        b = body[i]
        if CATALOG[b.kind].same_channels:
            return None
        options = [w for w in self.widths if w != b.out_channels]
        body = list(body)
        body[i] = replace(b, out_channels=rnd.choice(options))
        return body


def _assign_taps(body: list[BlockSpec], rnd: random.Random) -> list[BlockSpec]:
    n_taps = rnd.randint(1, min(3, len(body)))
    positions = sorted(set(rnd.sample(range(len(body) - 1), n_taps - 1)) | {len(body) - 1})
    body = list(body)
    for j, i in enumerate(positions):
        body[i] = replace(body[i], tap=f"P{3 + j}")
    return body


def _within(arch: ArchitectureSpec, limits: ConstraintSet) -> bool:
    try:
        return not check(estimate(arch), limits)
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# mock generators


DEFAULT_SAMPLER = CatalogSampler()


def mock_explore(ctx: GenerationContext, sampler: ArchSampler | None = None) -> str:
    """Seeded stand-in for a small exploration model.

    Half the time a fresh random architecture; otherwise 2-4 edits of a random
    pool member. Output is channel-consistent by construction.
    """
    sampler = sampler or DEFAULT_SAMPLER
    rnd = random.Random(ctx.seed)
    if not ctx.pool or rnd.random() < 0.5:
        return serialize(sampler.random(rnd, ctx))
    arch = ctx.parse(rnd.choice(ctx.pool).serialization)
    for _ in range(rnd.randint(2, 4)):
        arch = sampler.mutate(arch, rnd, ctx, single=False)
    return serialize(arch)


def mock_refine(ctx: GenerationContext, sampler: ArchSampler | None = None) -> str:
    """Seeded stand-in for a refinement model: one edit of the base."""
    if ctx.base is None:
        raise ValueError("mock_refine needs a base architecture")
    sampler = sampler or DEFAULT_SAMPLER
    rnd = random.Random(ctx.seed)
    return serialize(sampler.mutate(ctx.parse(ctx.base.serialization), rnd, ctx, single=True))


@dataclass
class MockGenerator:
    fn: Callable[..., str]
    sampler: ArchSampler | None = None
    name: str = "mock"

    def __call__(self, ctx: GenerationContext) -> GeneratorResult:
        text = self.fn(ctx, self.sampler)
        return GeneratorResult(raw_text=text, extracted=text, attempts=1)


def mock_pair(sampler: ArchSampler | None = None) -> tuple[MockGenerator, MockGenerator]:
    return (
        MockGenerator(mock_explore, sampler, "mock-explore"),
        MockGenerator(mock_refine, sampler, "mock-refine"),
    )


# ---------------------------------------------------------------------------
# prompts and extraction

GRAMMAR_TEXT = """\
Write one block per line as Name(in_channels,out_channels,stride,repeats).
All four arguments are positive integers; stride is 1 or 2.
The out_channels of each block must equal the in_channels of the next block.
The first block takes the 3-channel input image."""

FEW_SHOT = {
    Mode.CLASSIFICATION: (
        "ConvK3BNRELU(3,16,1,1)\nResK3K3(16,32,2,1)\nResK1K3K1(32,64,2,2)\nGAP(64,64,1,1)\nFC(64,10,1,1)",
        "ConvK5BNRELU(3,24,2,1)\nResK5K5(24,24,1,2)\nConvK1BNRELU(24,48,1,1)\nGAP(48,48,1,1)\nFC(48,10,1,1)",
    ),
    Mode.DETECTION: (
        "ConvK3BNRELU(3,16,2,1)\nResK3K3(16,32,2,1)@P3\nSCDown(32,64,2,1)\nPSA(64,64,1,1)@P4",
        "ConvK3BNRELU(3,24,2,1)\nConvK3BNRELU(24,32,2,1)@P3\nResK3K3(32,64,2,1)@P4\nSCDown(64,96,2,1)@P5",
    ),
}


def catalog_table(mode: Mode) -> str:
    rows = ["| block | kernels | strides | notes |", "|---|---|---|---|"]
    for sig in CATALOG.values():
        if mode not in sig.modes:
            continue
        kernels = ",".join(map(str, sig.kernels)) or "-"
        strides = ",".join(map(str, sorted(sig.strides)))
        rows.append(f"| {sig.kind.value} | {kernels} | {strides} | {sig.description} |")
    return "\n".join(rows)


def _constraint_lines(c: ConstraintSet) -> list[str]:
    lines = []
    if c.max_params is not None:
        lines.append(f"- at most {c.max_params} parameters")
    if c.min_params is not None:
        lines.append(f"- at least {c.min_params} parameters")
    if c.max_flops is not None:
        lines.append(f"- at most {c.max_flops} FLOPs")
    if c.max_depth is not None:
        lines.append(f"- at most {c.max_depth} blocks / expanded layers")
    return lines or ["- none"]


def build_prompt(ctx: GenerationContext) -> list[dict[str, str]]:
    mode = ctx.mode
    system = (
        "You design convolutional neural network architectures in a fixed template language. "
        "Reply with exactly one architecture inside a fenced code block."
    )
    parts = [
        f"Task: {mode.value} network, input {ctx.resolution}x{ctx.resolution} RGB image.",
        "",
        "Template language:",
        GRAMMAR_TEXT,
    ]
    if mode is Mode.CLASSIFICATION:
        parts.append(f"The network must end with GAP(c,c,1,1) then FC(c,{ctx.num_classes},1,1).")
    else:
        parts.append("Mark multi-scale feature outputs by suffixing blocks with @P3, @P4, @P5 (at least one).")
    parts += ["", "Available blocks:", catalog_table(mode), "", "Constraints:"]
    parts += _constraint_lines(ctx.constraints)
    parts += ["", "Examples:"]
    for ex in FEW_SHOT[mode]:
        parts += ["```", ex, "```"]
    if ctx.pool:
        parts += ["", "Best architectures so far (score higher is better):"]
        for entry in ctx.pool:
            parts += [f"score {entry.score:.4f}:", "```", entry.serialization.rstrip("\n"), "```"]
    if ctx.phase is Phase.REFINEMENT:
        assert ctx.base is not None
        p = ctx.base.profile
        parts += [
            "",
            f"Base architecture (score {ctx.base.score:.4f}, params {p.params}, FLOPs {p.flops}, depth {p.depth}):",
            "```",
            ctx.base.serialization.rstrip("\n"),
            "```",
        ]
        if ctx.feedback:
            parts += ["Feedback on recent attempts:"] + [f"- {line}" for line in ctx.feedback]
        parts += [
            "",
            "Refine the base architecture: improve while preserving overall structure. "
            "Emit one architecture in a fenced code block.",
        ]
    else:
        parts += ["", "Propose one new, diverse architecture. Emit it in a fenced code block."]
    return [{"role": "system", "content": system}, {"role": "user", "content": "\n".join(parts)}]


class ExtractionError(ValueError):
    def __init__(self, message: str, result: GeneratorResult | None = None) -> None:
        super().__init__(message)
        self.result = result


class TransportError(RuntimeError):
    pass


_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_BLOCK_LINE_RE = re.compile(
    r"^\s*[A-Za-z_][A-Za-z0-9_]*\s*\(\s*\d+\s*(,\s*\d+\s*)*\)\s*(@\s*P\d+)?\s*(#.*)?$", re.ASCII
)


def _is_block_line(line: str) -> bool:
    parts = [p for p in line.split(";") if p.strip()]
    return bool(parts) and all(_BLOCK_LINE_RE.match(p) for p in parts)


def extract_architecture(raw: str) -> str:
    """DSL text from a model reply: first fenced block, else the longest run of block lines."""
    m = _FENCE_RE.search(raw)
    if m:
        content = m.group(1).strip()
        if any(_is_block_line(line) for line in content.splitlines()):
            return content
    best: list[str] = []
    run: list[str] = []
    for line in raw.splitlines() + [""]:
        if _is_block_line(line):
            run.append(line.strip())
        else:
            if len(run) > len(best):
                best = run
            run = []
    if not best:
        raise ExtractionError("no architecture found in response")
    return "\n".join(best)


# ---------------------------------------------------------------------------
# endpoint client


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_explore: str
    model_refine: str
    temperature_explore: float = 1.0
    temperature_refine: float = 0.2
    timeout: float = 60.0
    max_retries: int = 2
    api_key: str | None = field(default=None, repr=False)

    @classmethod
    def from_env(cls, **values) -> EndpointConfig:
        """Fill base_url / api_key from PHASENAS_* variables unless given explicitly."""
        if not values.get("base_url"):
            values["base_url"] = os.environ.get("PHASENAS_BASE_URL", "")
        if not values.get("api_key"):
            values["api_key"] = os.environ.get("PHASENAS_API_KEY") or None
        return cls(**values)

    def model_for(self, phase: Phase) -> tuple[str, float]:
        if phase is Phase.REFINEMENT:
            return self.model_refine, self.temperature_refine
        return self.model_explore, self.temperature_explore


Transport = Callable[[str, dict, dict, float], dict]


def httpx_transport(url: str, headers: dict, payload: dict, timeout: float) -> dict:
    import httpx

    try:
        resp = httpx.post(url, headers=headers, json=payload, timeout=timeout)
    except httpx.HTTPError as exc:
        raise TransportError(f"{type(exc).__name__}: {exc}") from None
    if resp.status_code >= 400:
        raise TransportError(f"HTTP {resp.status_code}")
    try:
        return resp.json()
    except ValueError:
        raise TransportError("response is not JSON") from None


def _redact(text: str, secret: str | None) -> str:
    return text.replace(secret, "***") if secret else text


CORRECTIVE = "Your previous output failed: {error}. Emit only a corrected architecture."


def llm_generate(
    ctx: GenerationContext,
    ep: EndpointConfig,
    transport: Transport | None = None,
    check_text: Callable[[str], str | None] | None = None,
) -> GeneratorResult:
    """Request one architecture, re-prompting on extraction/validation failure.

    At most ``ep.max_retries + 1`` requests are sent. ``check_text`` returns an
    error message for extracted text the caller cannot use, or None.
    """
    if not ep.api_key:
        raise TransportError("no API key configured (set PHASENAS_API_KEY)")
    transport = transport or httpx_transport
    model, temperature = ep.model_for(ctx.phase)
    url = ep.base_url.rstrip("/") + "/chat/completions"
    headers = {"Authorization": f"Bearer {ep.api_key}", "Content-Type": "application/json"}
    messages = build_prompt(ctx)
    raw, error = "", "no attempt made"
    transport_failed = False
    for attempt in range(1, ep.max_retries + 2):
        payload = {"model": model, "messages": messages, "temperature": temperature}
        log.debug("POST %s model=%s attempt=%d", url, model, attempt)
        try:
            response = transport(url, headers, payload, ep.timeout)
            raw = response["choices"][0]["message"]["content"]
            if not isinstance(raw, str):
                raise TypeError("content is not a string")
        except TransportError as exc:
            error = _redact(str(exc), ep.api_key)
            transport_failed = True
            log.warning("transport failure on attempt %d: %s", attempt, error)
            continue
        except (KeyError, IndexError, TypeError):
            error = "malformed chat-completion response"
            transport_failed = True
            log.warning("attempt %d: %s", attempt, error)
            continue
        transport_failed = False
        try:
            text = extract_architecture(raw)
            problem = check_text(text) if check_text else None
        except ExtractionError as exc:
            problem = str(exc)
        if problem is None:
            return GeneratorResult(raw_text=raw, extracted=text, attempts=attempt)
        error = problem
        log.info("attempt %d rejected: %s", attempt, problem)
        messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user", "content": CORRECTIVE.format(error=problem)},
        ]
    attempts = ep.max_retries + 1
    if transport_failed:
        raise TransportError(f"request failed after {attempts} attempts: {error}")
    result = GeneratorResult(raw_text=raw, extracted=None, attempts=attempts, error=error)
    raise ExtractionError(f"no usable architecture after {attempts} attempts: {error}", result)


def structural_check(ctx: GenerationContext) -> Callable[[str], str | None]:
    """Parse + validate hook for re-prompting."""
    from .arch_dsl import validate

    def check_text(text: str) -> str | None:
        try:
            arch = ctx.parse(text)
        except ParseError as exc:
            return f"ParseError {exc}"
        errors = validate(arch, ctx.constraints)
        if errors:
            return "; ".join(str(e) for e in errors[:3])
        return None

    return check_text


@dataclass
class LLMGenerator:
    endpoint: EndpointConfig
    transport: Transport | None = None
    validate_output: bool = True
    name: str = "llm"

    def __call__(self, ctx: GenerationContext) -> GeneratorResult:
        check_text = structural_check(ctx) if self.validate_output else None
        try:
            return llm_generate(ctx, self.endpoint, self.transport, check_text)
        except ExtractionError as exc:
            if exc.result is not None:
                return exc.result
            raise


def llm_pair(endpoint: EndpointConfig, transport: Transport | None = None) -> tuple[LLMGenerator, LLMGenerator]:
    return (
        LLMGenerator(endpoint, transport, name=f"llm:{endpoint.model_explore}"),
        LLMGenerator(endpoint, transport, name=f"llm:{endpoint.model_refine}"),
    )


def pool_summary(entries: Sequence[tuple[str, float]], top_k: int = 5) -> tuple[PoolEntry, ...]:
    return tuple(PoolEntry(s, float(score)) for s, score in list(entries)[:top_k])
