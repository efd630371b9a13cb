from __future__ import annotations

import itertools
import math
import random

import pytest

from phasenas.arch_dsl import BlockKind, parse_architecture, serialize, validate
from phasenas.bench_oracle import (
    BENCH_SCORE_CONFIG,
    BenchConfig,
    MicroSpace,
    NotInSpace,
    OracleTable,
    config_hash,
    enumerate_space,
    initial_member,
    rank_of,
    ranks_from_scores,
    run_bench,
    tabulate,
)
from phasenas.generators import GenerationContext, Phase
from phasenas.nn_eval import ScoreConfig


def test_space_has_729_distinct_valid_members():
    members = enumerate_space()
    assert len(members) == 729 == MicroSpace().size
    texts = {serialize(a) for a in members}
    assert len(texts) == 729
    assert all(validate(a) == [] for a in members)


def test_enumeration_is_the_cartesian_product_in_counter_order():
    space = MicroSpace()
    members = enumerate_space(space)
    for picks, arch in zip(itertools.product(range(3), repeat=6), members):
        assert space.picks_of(arch) == picks
    assert [b.kind for b in members[1].blocks[:6]] == [BlockKind.Identity] * 5 + [BlockKind.ConvK3BNRELU]


def test_all_identity_member_present():
    text = serialize(initial_member())
    assert text.count("Identity") == 6
    assert text in {serialize(a) for a in enumerate_space()}


def test_ranks_share_the_better_rank_on_ties():
    assert ranks_from_scores([3.0, 1.0, 3.0, 2.0]) == [1, 4, 1, 3]
    assert ranks_from_scores([-math.inf, 0.0]) == [2, 1]


def test_table_ranks(oracle_table):
    assert len(oracle_table) == 729
    assert rank_of(oracle_table, parse_architecture(oracle_table.argmax())) == 1
    worst = rank_of(oracle_table, parse_architecture(oracle_table.argmin()))
    mus = [m for m, _ in oracle_table.entries.values()]
    assert worst == 1 + sum(m > min(mus) for m in mus)
    for m, r in oracle_table.entries.values():
        assert r == 1 + sum(x > m for x in mus)


def test_rank_consistency(oracle_table):
    items = list(oracle_table.entries.values())
    rnd = random.Random(0)
    for _ in range(5000):
        (ma, ra), (mb, rb) = rnd.sample(items, 2)
        if ma > mb:
            assert ra < rb


def test_out_of_space_lookup(oracle_table):
    outsider = parse_architecture("ConvK3BNRELU(3,8,1,1)\nGAP(8,8,1,1)\nFC(8,10,1,1)")
    with pytest.raises(NotInSpace):
        rank_of(oracle_table, outsider)
    with pytest.raises(NotInSpace):
        MicroSpace().picks_of(outsider)


def test_retabulation_is_bitwise_identical(oracle_table):
    again = tabulate(BENCH_SCORE_CONFIG, workers=2)
    assert again.entries == oracle_table.entries


def test_save_and_load(tmp_path, oracle_table):
    path = tmp_path / "table.jsonl"
    oracle_table.save(path)
    loaded = OracleTable.load(path, expect=BENCH_SCORE_CONFIG)
    assert loaded.entries == oracle_table.entries
    assert loaded.config == BENCH_SCORE_CONFIG
    with pytest.raises(ValueError):
        OracleTable.load(path, expect=ScoreConfig(seed=1))


def test_config_hash_tracks_config():
    assert config_hash(BENCH_SCORE_CONFIG) == config_hash(ScoreConfig(0.01, 1e-5, 2, 8, 16, 0))
    assert config_hash(BENCH_SCORE_CONFIG) != config_hash(ScoreConfig(0.01, 1e-5, 2, 8, 16, 1))


def test_quantile(oracle_table):
    q = oracle_table.quantile(0.9)
    above = sum(m >= q for m, _ in oracle_table.entries.values())
    assert 70 <= above <= 75


def test_sampler_stays_in_space():
    space = MicroSpace()
    ctx = GenerationContext(Phase.EXPLORATION)
    rnd = random.Random(4)
    for _ in range(200):
        a = space.random(rnd, ctx)
        b = space.mutate(a, rnd, ctx, single=True)
        pa, pb = space.picks_of(a), space.picks_of(b)
        assert sum(x != y for x, y in zip(pa, pb)) == 1


def test_run_bench_reports_every_seed(oracle_table):
    report = run_bench(oracle_table, BenchConfig(max_iterations=30), seeds=[0, 1])
    assert report.ranks("phased") and len(report.ranks("phased")) == 2
    assert len(report.ranks("explore_only")) == 2
    for run in report.runs:
        assert 1 <= run.rank <= 729
        assert len(run.rank_trajectory) == 30
        assert all(b <= a for a, b in zip(run.rank_trajectory, run.rank_trajectory[1:]))
    assert all(r.transition_iteration is None for r in report.runs if r.variant == "explore_only")
