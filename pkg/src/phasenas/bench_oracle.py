"""Exhaustively enumerable micro search space with a brute-force score table.

Six body slots, each one of Identity / ConvK3BNRELU / ResK3K3, over the fixed
channel schedule 3-8-16-16-32-32-64 with strides (1,2,1,2,1,1), plus the
GAP/FC head: 3**6 = 729 architectures. Scoring all of them gives exact ranks
against which a search result can be judged.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from random import Random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Sequence

from .arch_dsl import ArchitectureSpec, BlockKind, BlockSpec, Mode, serialize
from .generators import GenerationContext, mock_pair
from .nn_eval import NonFiniteScore, ScoreConfig, score_architecture
from .search_core import ScoreCache, SearchConfig, run_search

FORMAT_VERSION = 1

# Pinned tabulation settings: 16x16 inputs, batch 8, two repeats.
BENCH_SCORE_CONFIG = ScoreConfig(gamma_mix=0.01, epsilon=1e-5, repeats=2, batch_size=8, resolution=16, seed=0)


class NotInSpace(KeyError):
    pass


@dataclass(frozen=True)
class MicroSpace:
    choices: tuple[BlockKind, ...] = (BlockKind.Identity, BlockKind.ConvK3BNRELU, BlockKind.ResK3K3)
    channels: tuple[int, ...] = (3, 8, 16, 16, 32, 32, 64)
    strides: tuple[int, ...] = (1, 2, 1, 2, 1, 1)
    num_classes: int = 10
    resolution: int = 32

    @property
    def slots(self) -> int:
        return len(self.strides)

    @property
    def size(self) -> int:
        return len(self.choices) ** self.slots

    def member(self, picks: Sequence[int]) -> ArchitectureSpec:
        blocks = [
            BlockSpec(self.choices[p], self.channels[i], self.channels[i + 1], self.strides[i], 1)
            for i, p in enumerate(picks)
        ]
        c = self.channels[-1]
        blocks += [BlockSpec(BlockKind.GAP, c, c), BlockSpec(BlockKind.FC, c, self.num_classes)]
        return ArchitectureSpec(tuple(blocks), Mode.CLASSIFICATION, self.channels[0], self.resolution)

    def picks_of(self, arch: ArchitectureSpec) -> tuple[int, ...]:
        try:
            picks = tuple(self.choices.index(b.kind) for b in arch.blocks[: self.slots])
        except ValueError:
            raise NotInSpace(serialize(arch)) from None
        if len(picks) != self.slots or self.member(picks) != replace(arch, input_resolution=self.resolution):
            raise NotInSpace(serialize(arch))
        return picks

    # ArchSampler interface, so the mock generators can stay inside the space
    def random(self, rnd: Random, ctx: GenerationContext) -> ArchitectureSpec:
        return self.member([rnd.randrange(len(self.choices)) for _ in range(self.slots)])

    def mutate(self, arch: ArchitectureSpec, rnd: Random, ctx: GenerationContext, *, single: bool) -> ArchitectureSpec:
        picks = list(self.picks_of(arch))
        i = rnd.randrange(self.slots)
        picks[i] = rnd.choice([c for c in range(len(self.choices)) if c != picks[i]])
        return self.member(picks)


def enumerate_space(space: MicroSpace = MicroSpace()) -> list[ArchitectureSpec]:
    return [space.member(p) for p in itertools.product(range(len(space.choices)), repeat=space.slots)]


def config_hash(cfg: ScoreConfig, space: MicroSpace = MicroSpace()) -> str:
    payload = json.dumps({"score": cfg.to_dict(), "space": _space_dict(space)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _space_dict(space: MicroSpace) -> dict:
    return {
        "choices": [c.value for c in space.choices],
        "channels": list(space.channels),
        "strides": list(space.strides),
        "num_classes": space.num_classes,
        "resolution": space.resolution,
    }


def ranks_from_scores(scores: Sequence[float]) -> list[int]:
    """rank = 1 + number of strictly greater scores (ties share the better rank)."""
    ordered = sorted(scores, reverse=True)
    first: dict[float, int] = {}
    for i, s in enumerate(ordered):
        first.setdefault(s, i + 1)
    return [first[s] for s in scores]


@dataclass
class OracleTable:
    config: ScoreConfig
    space: MicroSpace = MicroSpace()
    entries: dict[str, tuple[float, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def rank_of_score(self, mu: float) -> int:
        return 1 + sum(1 for m, _ in self.entries.values() if m > mu)

    def argmax(self) -> str:
        return min(self.entries, key=lambda k: (self.entries[k][1], k))

    def argmin(self) -> str:
        return max(self.entries, key=lambda k: (self.entries[k][1], k))

    def quantile(self, q: float) -> float:
        finite = sorted(m for m, _ in self.entries.values() if math.isfinite(m))
        idx = min(len(finite) - 1, max(0, math.ceil(q * len(finite)) - 1))
        return finite[idx]

    def save(self, path) -> None:
        header = {
            "format": "phasenas-oracle",
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "space": _space_dict(self.space),
            "config_hash": config_hash(self.config, self.space),
            "size": len(self.entries),
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for text, (mu, rank) in self.entries.items():
                fh.write(json.dumps({"arch": text, "mu": mu, "rank": rank}) + "\n")

    @classmethod
    def load(cls, path, expect: ScoreConfig | None = None, space: MicroSpace = MicroSpace()) -> OracleTable:
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != "phasenas-oracle" or header.get("version") != FORMAT_VERSION:
                raise ValueError(f"{path}: not a version-{FORMAT_VERSION} oracle table")
            cfg = ScoreConfig(**header["config"])
            if expect is not None and header["config_hash"] != config_hash(expect, space):
                raise ValueError(f"{path}: cached table was built with a different configuration")
            entries = {}
            for line in fh:
                d = json.loads(line)
                entries[d["arch"]] = (float(d["mu"]), int(d["rank"]))
        return cls(cfg, space, entries)


def _mu(arch: ArchitectureSpec, cfg: ScoreConfig) -> float:
    try:
        return score_architecture(arch, cfg).mean
    except NonFiniteScore:
        return -math.inf


def tabulate(cfg: ScoreConfig = BENCH_SCORE_CONFIG, space: MicroSpace = MicroSpace(), workers: int = 1) -> OracleTable:
    """Score every member; non-finite scores become -inf and rank last."""
    archs = enumerate_space(space)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(lambda a: _mu(a, cfg), archs))
    else:
        scores = [_mu(a, cfg) for a in archs]
    ranks = ranks_from_scores(scores)
    entries = {serialize(a): (s, r) for a, s, r in zip(archs, scores, ranks)}
    return OracleTable(cfg, space, entries)


def rank_of(table: OracleTable, arch: ArchitectureSpec) -> int:
    text = serialize(arch)
    if text not in table.entries:
        raise NotInSpace(text)
    return table.entries[text][1]


# ---------------------------------------------------------------------------
# search-vs-oracle benchmark


@dataclass(frozen=True)
class BenchConfig:
    seeds: int = 10
    pool_size: int = 5
    max_iterations: int = 200
    trans_quantile: float = 0.9


@dataclass
class BenchRun:
    seed: int
    variant: str
    rank: int
    mu: float
    transition_iteration: int | None
    rank_trajectory: list[int]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    gamma_trans: float
    runs: list[BenchRun]

    def ranks(self, variant: str) -> list[int]:
        return [r.rank for r in self.runs if r.variant == variant]

    def median_rank(self, variant: str) -> float:
        return median(self.ranks(variant))

    def to_dict(self) -> dict:
        return {
            "gamma_trans": self.gamma_trans,
            "median_rank": {v: self.median_rank(v) for v in ("phased", "explore_only")},
            "runs": [r.to_dict() for r in self.runs],
        }


def initial_member(space: MicroSpace = MicroSpace()) -> ArchitectureSpec:
    """All-Identity member, the starting point of benchmark searches."""
    return space.member([0] * space.slots)


def run_bench(table: OracleTable, bench: BenchConfig = BenchConfig(), seeds: Sequence[int] | None = None) -> BenchReport:
    """Two-phase search vs. an exploration-only ablation over the same seeds."""
    space = table.space
    seeds = list(range(bench.seeds)) if seeds is None else list(seeds)
    gamma_trans = table.quantile(bench.trans_quantile)
    scorer = ScoreCache(table.config)
    gen_e, gen_r = mock_pair(space)
    runs = []
    for seed in seeds:
        for variant, trans in (("phased", gamma_trans), ("explore_only", math.inf)):
            cfg = SearchConfig(
                gamma_trans=trans,
                gamma_stop=math.inf,
                pool_size=bench.pool_size,
                max_iterations=bench.max_iterations,
                score_config=table.config,
                seed=seed,
            )
            result = run_search(initial_member(space), cfg, gen_e, gen_r, scorer=scorer)
            runs.append(
                BenchRun(
                    seed=seed,
                    variant=variant,
                    rank=rank_of(table, result.best),
                    mu=result.best_score,
                    transition_iteration=result.summary.transition_iteration,
                    rank_trajectory=[table.rank_of_score(r.pool_best) for r in result.records],
                )
            )
    return BenchReport(gamma_trans, runs)
