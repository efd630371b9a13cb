"""Acceptance criteria, one test each; the terminal summary prints PASS/FAIL per criterion."""

from __future__ import annotations

import logging
import math
import random
import socket
import time
from dataclasses import replace

import pytest

from conftest import sample_arch
from phasenas.arch_dsl import ArchitectureSpec, Mode, ParseError, as_detection, parse_architecture, serialize, validate
from phasenas.bench_oracle import BENCH_SCORE_CONFIG, BenchConfig, MicroSpace, initial_member, run_bench
from phasenas.generators import (
    BaseInfo,
    EndpointConfig,
    ExtractionError,
    GenerationContext,
    Phase,
    PoolEntry,
    TransportError,
    llm_generate,
    mock_explore,
    mock_pair,
    mock_refine,
)
from phasenas.nn_eval import (
    ScoreConfig,
    bn_term,
    build_network,
    classification_score,
    detection_score,
    forward_with_stats,
    score_inputs,
)
from phasenas.resource import estimate
from phasenas.search_core import SearchConfig, run_search
from reference import reference_score
from test_search_core import check_log_invariants


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, limit {self.seconds}s"


@pytest.mark.acceptance("1 score identities (gamma=0, single-tap = classification)")
def test_criterion_1_score_identities():
    cfg = ScoreConfig(gamma_mix=0.0, repeats=2, batch_size=4, resolution=16, seed=0)
    plain = replace(cfg, gamma_mix=0.01)
    worst = 0.0
    with Budget(120):
        for seed in range(100):
            arch = sample_arch(10_000 + seed)
            c = replace(cfg, seed=seed)
            net = build_network(arch, seed)
            report = classification_score(net, c)
            for i, s in enumerate(report.per_repeat):
                x1, _ = score_inputs(c, i)
                b = bn_term(forward_with_stats(net, x1, include_head=False).bn_variances, c.epsilon)
                worst = max(worst, abs(s - (math.log(c.epsilon) + b)))
            det = detection_score(build_network(as_detection(arch), seed), replace(plain, seed=seed))
            cls = classification_score(net, replace(plain, seed=seed))
            assert det.per_repeat == cls.per_repeat, arch
            assert (det.mean, det.std) == (cls.mean, cls.std)
    assert worst <= 1e-12


def two_tap_micro_net(rnd: random.Random) -> ArchitectureSpec:
    space = MicroSpace()
    member = space.member([rnd.randrange(3) for _ in range(space.slots)])
    body = list(member.blocks[: space.slots])
    i, j = sorted(rnd.sample(range(space.slots), 2))
    body[i] = replace(body[i], tap="P3")
    body[j] = replace(body[j], tap="P4")
    return ArchitectureSpec(tuple(body), Mode.DETECTION, 3, 32)


@pytest.mark.acceptance("2 equation-oracle equivalence (1e-6 relative)")
def test_criterion_2_reference_equivalence():
    rnd = random.Random(2024)
    worst = 0.0
    with Budget(60):
        for k in range(20):
            arch = two_tap_micro_net(rnd)
            assert validate(arch) == []
            cfg = ScoreConfig(repeats=2, batch_size=8, resolution=32, seed=k)
            _, mu_ref, _ = reference_score(arch, cfg)
            mu = detection_score(build_network(arch, k), cfg).mean
            worst = max(worst, abs(mu - mu_ref) / abs(mu_ref))
    assert worst <= 1e-6, worst


@pytest.mark.acceptance("3 resource exactness")
def test_criterion_3_resource_exactness():
    with Budget(60):
        fixture = estimate(parse_architecture("ConvK3BNRELU(3,8,1,1)@P1", Mode.DETECTION))
        assert fixture.params == 3 * 8 * 9 + 2 * 8 == 232
        assert fixture.flops == 2 * (3 * 8 * 9 * 32 * 32) + 2 * 8 * 32 * 32 + 8 * 32 * 32
        for seed in range(100):
            mode = Mode.DETECTION if seed % 2 else Mode.CLASSIFICATION
            arch = sample_arch(20_000 + seed, mode)
            assert estimate(arch).params == build_network(arch, seed).num_parameters


@pytest.mark.acceptance("4 search invariants on logs")
def test_criterion_4_search_invariants():
    space = MicroSpace()
    gen_e, gen_r = mock_pair(space)
    stops = []
    with Budget(300):
        for seed in range(10):
            cfg = SearchConfig(
                gamma_trans=3.5 + 0.1 * seed,
                gamma_stop=math.inf if seed % 2 else 5.5,
                pool_size=5,
                max_iterations=200,
                score_config=BENCH_SCORE_CONFIG,
                seed=seed,
            )
            result = run_search(initial_member(space), cfg, gen_e, gen_r)
            check_log_invariants(result.records, cfg)
            assert result.summary.iterations == len(result.records) <= cfg.max_iterations
            stops.append((result.summary.transition_iteration is not None, result.summary.stopped_by))
    # the checks above must see both transitions and early stops
    assert any(t for t, _ in stops)
    assert {"gamma_stop", "max_iterations"} <= {s for _, s in stops}


@pytest.mark.acceptance("5 search quality vs micro-space oracle")
def test_criterion_5_search_quality(oracle_table):
    with Budget(600):
        report = run_bench(oracle_table, BenchConfig(seeds=10, pool_size=5, max_iterations=200))
    phased = report.ranks("phased")
    explore = report.ranks("explore_only")
    print(f"phased ranks {phased}, explore-only ranks {explore}")
    assert sum(r <= 37 for r in phased) >= 9
    assert report.median_rank("phased") <= report.median_rank("explore_only")


def _fuzz_inputs(n):
    rnd = random.Random(6)
    seedtext = serialize(sample_arch(1)) + "ConvK3BNRELU(3,8,1,1)@P3;#x\n"
    for i in range(n):
        if i % 2:
            yield bytes(rnd.randrange(256) for _ in range(rnd.randrange(64)))
        else:
            chars = list(seedtext)
            for _ in range(rnd.randrange(1, 6)):
                pos = rnd.randrange(len(chars))
                op = rnd.randrange(3)
                if op == 0:
                    del chars[pos]
                elif op == 1:
                    chars.insert(pos, chr(rnd.randrange(1, 0x250)))
                else:
                    chars[pos] = rnd.choice("(),;@#\n 0123456789PQ-")
            yield "".join(chars).encode("utf-8", "surrogatepass")


@pytest.mark.acceptance("6 DSL robustness (fuzz, round trip, mock parseability)")
def test_criterion_6_dsl_robustness():
    with Budget(120):
        for raw in _fuzz_inputs(10_000):
            try:
                parse_architecture(raw.decode("utf-8", errors="replace"))
            except ParseError as exc:
                assert exc.line >= 1 and exc.column >= 1

        pool = tuple(PoolEntry(serialize(sample_arch(s)), float(s)) for s in range(5))
        for seed in range(10_000):
            ctx = GenerationContext(Phase.EXPLORATION, pool=pool if seed % 2 else (), seed=seed)
            text = mock_explore(ctx)
            arch = parse_architecture(text)
            assert serialize(arch) == text
            assert parse_architecture(serialize(arch)) == arch
            assert validate(arch) == []
        for seed in range(1000):
            base = sample_arch(seed)
            ctx = GenerationContext(
                Phase.REFINEMENT, base=BaseInfo(serialize(base), 1.0, estimate(base)), seed=seed
            )
            parse_architecture(mock_refine(ctx))


class _Recorded:
    def __init__(self, *contents):
        self.contents = list(contents)
        self.calls = 0

    def __call__(self, url, headers, payload, timeout):
        self.calls += 1
        item = self.contents.pop(0)
        if isinstance(item, Exception):
            raise item
        return {"choices": [{"message": {"role": "assistant", "content": item}}]}


@pytest.mark.acceptance("7 LLM client contract on recorded fixtures")
def test_criterion_7_llm_client_contract(monkeypatch, caplog):
    def no_network(*args, **kwargs):
        raise AssertionError("live network access attempted")

    monkeypatch.setattr(socket.socket, "connect", no_network)
    monkeypatch.setattr(socket, "create_connection", no_network)
    caplog.set_level(logging.DEBUG)
    secret = "sk-acceptance-0000-SECRET"
    ep = EndpointConfig("http://llm.invalid", "small", "large", api_key=secret, max_retries=2)
    ctx = GenerationContext(Phase.EXPLORATION)
    arch = "ConvK3BNRELU(3,16,1,1)\nGAP(16,16,1,1)\nFC(16,10,1,1)"

    t = _Recorded(f"Here:\n```\n{arch}\n```")
    result = llm_generate(ctx, ep, t)
    assert (result.extracted, result.attempts, t.calls) == (arch, 1, 1)

    t = _Recorded(f"Proposed network:\n{arch}\nHope it helps.")
    assert llm_generate(ctx, ep, t).extracted == arch

    t = _Recorded("I am not sure.", f"```\n{arch}\n```")
    result = llm_generate(ctx, ep, t)
    assert (result.attempts, t.calls) == (2, 2)

    t = _Recorded("nothing", "still nothing", "no")
    with pytest.raises(ExtractionError):
        llm_generate(ctx, ep, t)
    assert t.calls == ep.max_retries + 1

    t = _Recorded(TransportError(f"HTTP 401 bad key {secret}"), "prose", "prose")
    with pytest.raises(ExtractionError) as exc:
        llm_generate(ctx, ep, t)
    assert secret not in caplog.text
    assert secret not in str(exc.value)
    assert secret not in repr(ep)
