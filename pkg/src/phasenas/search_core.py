"""Phase-aware architecture search.

The controller keeps a bounded, score-ordered candidate pool. In the
exploration phase every valid candidate competes for a pool slot; once the
pool's best score reaches ``gamma_trans`` the controller switches (for good)
to refinement, where a base architecture is only replaced by strictly better
candidates. The loop ends when the pool's best score reaches ``gamma_stop``
or the iteration budget runs out.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

from . import rng
from .arch_dsl import ArchitectureSpec, ParseError, parse_architecture, serialize, validate
from .generators import (
    BaseInfo,
    ExtractionError,
    GenerationContext,
    Generator,
    GeneratorResult,
    Phase,
    PoolEntry,
)
from .nn_eval import NonFiniteScore, ScoreConfig, ScoreReport, score_architecture
from .resource import ConstraintSet, check, estimate

FEEDBACK_DEPTH = 3
POOL_SUMMARY_SIZE = 5


@dataclass(frozen=True)
class SearchConfig:
    gamma_trans: float
    gamma_stop: float
    pool_size: int = 5
    max_iterations: int = 200
    score_config: ScoreConfig = ScoreConfig()
    constraints: ConstraintSet = ConstraintSet()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gamma_trans > self.gamma_stop:
            raise ValueError(f"gamma_trans {self.gamma_trans} > gamma_stop {self.gamma_stop}")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class PoolMember:
    arch: ArchitectureSpec
    serialization: str
    score: float
    order: int


class CandidatePool:
    """Top-K architectures, best first; ties keep insertion order."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[PoolMember] = []
        self._inserted = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, serialization: str) -> bool:
        return any(e.serialization == serialization for e in self.entries)

    @property
    def max_score(self) -> float:
        return self.entries[0].score if self.entries else -math.inf

    @property
    def min_score(self) -> float:
        return self.entries[-1].score if self.entries else -math.inf

    def best(self) -> PoolMember:
        if not self.entries:
            raise LookupError("empty pool")
        return self.entries[0]

    def insert(self, arch: ArchitectureSpec, score: float) -> bool:
        """Admit if there is room or ``score`` beats the current minimum.

        Duplicates (same canonical text) are refused; on overflow the lowest
        entry is evicted.
        """
        text = serialize(arch)
        if text in self:
            return False
        if len(self.entries) >= self.capacity and not score > self.min_score:
            return False
        member = PoolMember(arch, text, float(score), self._inserted)
        self._inserted += 1
        self.entries.append(member)
        self.entries.sort(key=lambda e: (-e.score, e.order))
        del self.entries[self.capacity:]
        return True

    def summary(self, top_k: int = POOL_SUMMARY_SIZE) -> tuple[PoolEntry, ...]:
        return tuple(PoolEntry(e.serialization, e.score) for e in self.entries[:top_k])


def pool_insert(pool: CandidatePool, arch: ArchitectureSpec, score: float) -> tuple[CandidatePool, bool]:
    admitted = pool.insert(arch, score)
    return pool, admitted


def should_transition(pool: CandidatePool, cfg: SearchConfig) -> bool:
    return bool(pool.entries) and pool.max_score >= cfg.gamma_trans


def should_stop(pool: CandidatePool, cfg: SearchConfig, iteration: int) -> bool:
    return (bool(pool.entries) and pool.max_score >= cfg.gamma_stop) or iteration >= cfg.max_iterations


@dataclass
class PhaseState:
    tag: Phase = Phase.EXPLORATION
    base: ArchitectureSpec | None = None
    base_score: float | None = None


@dataclass
class IterationRecord:
    iteration: int
    phase: str
    generator: str
    candidate: str | None
    valid: bool
    mu: float | None
    sigma: float | None
    reason: str | None
    accepted: bool
    pool_best: float
    pool_worst: float
    pool_size: int
    base_mu: float | None
    transitioned: bool
    attempts: int
    duration: float | None = None

    def to_dict(self) -> dict:
        return {"type": "iteration", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> IterationRecord:
        d = dict(d)
        d.pop("type", None)
        return cls(**d)


@dataclass
class SearchSummary:
    best: str
    mu: float
    profile: dict
    iterations: int
    transition_iteration: int | None
    stopped_by: str

    def to_dict(self) -> dict:
        return {"type": "summary", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> SearchSummary:
        d = dict(d)
        d.pop("type", None)
        return cls(**d)


@dataclass
class SearchResult:
    best: ArchitectureSpec
    best_score: float
    records: list[IterationRecord]
    summary: SearchSummary


Sink = Callable[[dict], None]


class ScoreCache:
    """Memoised scoring; scores are deterministic so each architecture is scored once."""

    def __init__(self, cfg: ScoreConfig, score_fn: Callable[[ArchitectureSpec, ScoreConfig], ScoreReport] = score_architecture) -> None:
        self.cfg = cfg
        self.score_fn = score_fn
        self._cache: dict[tuple[str, str], ScoreReport | NonFiniteScore] = {}

    def __call__(self, arch: ArchitectureSpec) -> ScoreReport:
        key = (arch.mode.value, serialize(arch))
        if key not in self._cache:
            try:
                self._cache[key] = self.score_fn(arch, self.cfg)
            except NonFiniteScore as exc:
                self._cache[key] = exc
        hit = self._cache[key]
        if isinstance(hit, NonFiniteScore):
            raise hit
        return hit

    def __len__(self) -> int:
        return len(self._cache)


class _Rejected(Exception):
    pass


class SearchController:
    def __init__(
        self,
        init: ArchitectureSpec,
        cfg: SearchConfig,
        gen_explore: Generator,
        gen_refine: Generator,
        *,
        scorer: Callable[[ArchitectureSpec], ScoreReport] | None = None,
        sink: Sink | None = None,
        record_timing: bool = False,
        clock: Callable[[], float] = time.perf_counter,
    ) -> None:
        errors = validate(init, cfg.constraints)
        if errors:
            raise ValueError(f"initial architecture is invalid: {errors[0]}")
        self.cfg = cfg
        self.mode = init.mode
        self.resolution = init.input_resolution
        self.num_classes = init.num_classes or 10
        self.gen_explore = gen_explore
        self.gen_refine = gen_refine
        self.scorer = scorer or ScoreCache(cfg.score_config)
        self.sink = sink
        self.record_timing = record_timing
        self.clock = clock
        self.pool = CandidatePool(cfg.pool_size)
        self.phase = PhaseState()
        self.iteration = 0
        self.records: list[IterationRecord] = []
        self.rejections: deque[str] = deque(maxlen=FEEDBACK_DEPTH)
        self.transition_iteration: int | None = None
        self.pool.insert(init, self.scorer(init).mean)

    # -- helpers ---------------------------------------------------------

    def _context(self, phase: Phase) -> GenerationContext:
        base = None
        feedback: tuple[str, ...] = ()
        if phase is Phase.REFINEMENT:
            assert self.phase.base is not None and self.phase.base_score is not None
            base = BaseInfo(serialize(self.phase.base), self.phase.base_score, estimate(self.phase.base))
            feedback = tuple(self.rejections)
        return GenerationContext(
            phase=phase,
            mode=self.mode,
            constraints=self.cfg.constraints,
            pool=self.pool.summary(),
            base=base,
            feedback=feedback,
            seed=rng.derive_seed(self.cfg.seed, "generate", self.iteration),
            num_classes=self.num_classes,
            resolution=self.resolution,
        )

    def _evaluate(self, result: GeneratorResult) -> tuple[ArchitectureSpec, ScoreReport]:
        """Parse, validate (structure + resources) and score; raises _Rejected."""
        if result.extracted is None:
            raise _Rejected(f"ExtractionError: {result.error or 'no architecture in output'}")
        try:
            arch = parse_architecture(result.extracted, self.mode, input_resolution=self.resolution)
        except ParseError as exc:
            raise _Rejected(f"ParseError: {exc}") from None
        errors = validate(arch, self.cfg.constraints)
        if errors:
            raise _Rejected("Invalid: " + "; ".join(str(e) for e in errors[:3]))
        violations = check(estimate(arch), self.cfg.constraints)
        if violations:
            raise _Rejected("Resource: " + "; ".join(str(v) for v in violations))
        try:
            report = self.scorer(arch)
        except NonFiniteScore as exc:
            raise _Rejected(f"NonFinite: {exc}") from None
        return arch, report

    def _generate(self, gen: Generator, ctx: GenerationContext) -> GeneratorResult:
        try:
            return gen(ctx)
        except ExtractionError as exc:
            if exc.result is not None:
                return exc.result
            return GeneratorResult(raw_text="", extracted=None, attempts=1, error=str(exc))

    def _emit(self, record: IterationRecord) -> IterationRecord:
        self.records.append(record)
        if self.sink is not None:
            self.sink(record.to_dict())
        return record

    # -- steps -----------------------------------------------------------

    def step_exploration(self) -> IterationRecord:
        if self.phase.tag is not Phase.EXPLORATION:
            raise RuntimeError("step_exploration called outside the exploration phase")
        start = self.clock()
        ctx = self._context(Phase.EXPLORATION)
        result = self._generate(self.gen_explore, ctx)
        mu = sigma = None
        valid = accepted = False
        reason = None
        try:
            arch, report = self._evaluate(result)
            valid, mu, sigma = True, report.mean, report.std
            accepted = self.pool.insert(arch, mu)
            if not accepted:
                if serialize(arch) in self.pool:
                    reason = "duplicate of a pool member"
                else:
                    reason = f"score {mu:.6g} not above pool minimum {self.pool.min_score:.6g}"
        except _Rejected as exc:
            reason = str(exc)
        if reason is not None:
            self.rejections.append(reason)
        transitioned = False
        if should_transition(self.pool, self.cfg):
            best = self.pool.best()
            self.phase = PhaseState(Phase.REFINEMENT, best.arch, best.score)
            self.transition_iteration = self.iteration
            transitioned = True
        return self._finish(Phase.EXPLORATION, self.gen_explore, result, valid, mu, sigma, reason, accepted, transitioned, start)

    def step_refinement(self) -> IterationRecord:
        if self.phase.tag is not Phase.REFINEMENT:
            raise RuntimeError("step_refinement called outside the refinement phase")
        start = self.clock()
        ctx = self._context(Phase.REFINEMENT)
        result = self._generate(self.gen_refine, ctx)
        mu = sigma = None
        valid = accepted = False
        reason = None
        try:
            arch, report = self._evaluate(result)
            valid, mu, sigma = True, report.mean, report.std
            assert self.phase.base_score is not None
            if mu > self.phase.base_score:
                self.phase = PhaseState(Phase.REFINEMENT, arch, mu)
                self.pool.insert(arch, mu)
                accepted = True
            else:
                reason = f"score {mu:.6g} not above base {self.phase.base_score:.6g}"
        except _Rejected as exc:
            reason = str(exc)
        if reason is not None:
            self.rejections.append(reason)
        return self._finish(Phase.REFINEMENT, self.gen_refine, result, valid, mu, sigma, reason, accepted, False, start)

    def _finish(self, phase, gen, result, valid, mu, sigma, reason, accepted, transitioned, start) -> IterationRecord:
        record = IterationRecord(
            iteration=self.iteration,
            phase=phase.value,
            generator=getattr(gen, "name", type(gen).__name__),
            candidate=result.extracted,
            valid=valid,
            mu=mu,
            sigma=sigma,
            reason=reason,
            accepted=accepted,
            pool_best=self.pool.max_score,
            pool_worst=self.pool.min_score,
            pool_size=len(self.pool),
            base_mu=self.phase.base_score,
            transitioned=transitioned,
            attempts=result.attempts,
            duration=(self.clock() - start) if self.record_timing else None,
        )
        self.iteration += 1
        return self._emit(record)

    def step(self) -> IterationRecord:
        if self.phase.tag is Phase.EXPLORATION:
            return self.step_exploration()
        return self.step_refinement()

    def run(self) -> SearchResult:
        while not should_stop(self.pool, self.cfg, self.iteration):
            self.step()
        best = self.pool.best()
        stopped_by = "gamma_stop" if best.score >= self.cfg.gamma_stop else "max_iterations"
        summary = SearchSummary(
            best=best.serialization,
            mu=best.score,
            profile=estimate(best.arch).to_dict(),
            iterations=self.iteration,
            transition_iteration=self.transition_iteration,
            stopped_by=stopped_by,
        )
        if self.sink is not None:
            self.sink(summary.to_dict())
        return SearchResult(best.arch, best.score, self.records, summary)


def run_search(
    init: ArchitectureSpec,
    cfg: SearchConfig,
    gen_explore: Generator,
    gen_refine: Generator,
    **kwargs,
) -> SearchResult:
    return SearchController(init, cfg, gen_explore, gen_refine, **kwargs).run()


# ---------------------------------------------------------------------------
# line-delimited logs


class JsonlSink:
    """Append-only JSON-lines writer, flushed per record."""

    def __init__(self, path) -> None:
        self.path = path
        self._fh = open(path, "a", encoding="utf-8", newline="\n")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> JsonlSink:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_log(path) -> tuple[list[IterationRecord], SearchSummary | None]:
    records: list[IterationRecord] = []
    summary = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("type") == "iteration":
                records.append(IterationRecord.from_dict(d))
            elif d.get("type") == "summary":
                summary = SearchSummary.from_dict(d)
    return records, summary


def iter_best_trajectory(records: Iterable[IterationRecord]) -> list[float]:
    return [r.pool_best for r in records]
