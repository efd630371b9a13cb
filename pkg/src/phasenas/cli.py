"""Command line entry point.

Exit codes: 0 ok, 1 parse/validation/scoring failure, 2 I/O or configuration
error, 3 generator transport failure (partial log kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .arch_dsl import ArchitectureSpec, Mode, ParseError, parse_architecture, serialize, validate, write_arch_file
from .bench_oracle import MicroSpace, OracleTable, config_hash, initial_member, run_bench, tabulate
from .config import ConfigError, RunConfig, load_config
from .generators import TransportError, llm_pair, mock_pair
from .nn_eval import NonFiniteScore, score_architecture
from .resource import FLOPS_CONVENTION, estimate
from .search_core import JsonlSink, SearchConfig, run_search

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_TRANSPORT = 0, 1, 2, 3

DEFAULT_INIT = {
    Mode.CLASSIFICATION: "ConvK3BNRELU(3,16,1,1)\nConvK3BNRELU(16,32,2,1)\nGAP(32,32,1,1)\nFC(32,10,1,1)\n",
    Mode.DETECTION: "ConvK3BNRELU(3,16,2,1)\nConvK3BNRELU(16,32,2,1)@P3\nConvK3BNRELU(32,64,2,1)@P4\n",
}


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _load_arch(path: str, mode: Mode, resolution: int = 32) -> ArchitectureSpec:
    text = _read_text(path)
    try:
        arch = parse_architecture(text, mode, input_resolution=resolution)
    except ParseError as exc:
        raise CliError(f"{path}:{exc.line}:{exc.column}: ParseError: {exc.message}", EXIT_INVALID) from None
    return arch


def _check_valid(arch: ArchitectureSpec, path: str, limits=None) -> None:
    errors = validate(arch, limits)
    if errors:
        raise CliError("\n".join(f"{path}: {e}" for e in errors), EXIT_INVALID)


def _config(args) -> RunConfig:
    overrides = {"seed": getattr(args, "seed", None), "mode": getattr(args, "mode", None)}
    if getattr(args, "generator", None):
        overrides["generator"] = args.generator
    try:
        return load_config(getattr(args, "config", None), overrides)
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_IO) from None


def _out_dir(cfg: RunConfig) -> Path:
    d = cfg.resolve(cfg.output.dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {d}: {exc.strerror}", EXIT_IO) from None
    return d


# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = _config(args)
    mode = cfg.mode
    arch = _load_arch(args.file, mode)
    _check_valid(arch, args.file, cfg.constraints)
    print(f"{args.file}: ok ({len(arch.blocks)} blocks, {mode.value})")
    return EXIT_OK


def cmd_estimate(args) -> int:
    mode = _config(args).mode
    arch = _load_arch(args.file, mode, args.resolution)
    _check_valid(arch, args.file)
    p = estimate(arch)
    print(f"# {FLOPS_CONVENTION}")
    print(f"params\t{p.params}")
    print(f"flops\t{p.flops}")
    print(f"depth\t{p.depth}")
    print(f"resolution\t{p.resolution}")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    arch = _load_arch(args.file, cfg.mode)
    _check_valid(arch, args.file)
    record = {"arch": serialize(arch), "mode": cfg.mode.value}
    try:
        report = score_architecture(arch, cfg.score)
    except NonFiniteScore as exc:
        record.update(status="nonfinite", detail=str(exc), config=cfg.score.to_dict())
        code = EXIT_INVALID
        _err(f"{args.file}: NonFinite score ({exc})")
    else:
        record.update(status="ok", **report.to_record())
        code = EXIT_OK
        print(f"mu\t{report.mean:.10g}")
        print(f"sigma\t{report.std:.10g}")
        print(f"R\t{len(report.per_repeat)}")
    out = Path(args.out) if args.out else _out_dir(cfg) / "scores.jsonl"
    try:
        with open(out, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc.strerror}", EXIT_IO) from None
    return code


def _init_arch(cfg: RunConfig) -> ArchitectureSpec:
    if cfg.search.space == "micro":
        if cfg.mode is not Mode.CLASSIFICATION:
            raise CliError("config error: the micro space is classification-only", EXIT_IO)
        return initial_member()
    if cfg.init:
        path = str(cfg.resolve(cfg.init))
        arch = _load_arch(path, cfg.mode, cfg.score.resolution)
    else:
        arch = parse_architecture(DEFAULT_INIT[cfg.mode], cfg.mode, input_resolution=cfg.score.resolution)
        path = "<default init>"
    _check_valid(arch, path, cfg.constraints)
    return arch


def _generators(cfg: RunConfig):
    sampler = MicroSpace() if cfg.search.space == "micro" else None
    if cfg.generator == "mock":
        return mock_pair(sampler)
    ep = cfg.endpoint_config()
    if not ep.api_key:
        raise CliError("config error: llm generator requires an API key (PHASENAS_API_KEY)", EXIT_IO)
    if not ep.base_url or not ep.model_explore or not ep.model_refine:
        raise CliError("config error: llm generator requires base_url, model_explore and model_refine", EXIT_IO)
    return llm_pair(ep)


def cmd_search(args) -> int:
    cfg = _config(args)
    gen_e, gen_r = _generators(cfg)
    init = _init_arch(cfg)
    s = cfg.search
    search_cfg = SearchConfig(
        gamma_trans=s.gamma_trans,
        gamma_stop=s.gamma_stop,
        pool_size=s.pool_size,
        max_iterations=s.max_iterations,
        score_config=cfg.score,
        constraints=cfg.constraints,
        seed=cfg.seed,
    )
    out = _out_dir(cfg)
    log_path = out / "search_log.jsonl"
    log_path.write_text("", encoding="utf-8")
    with JsonlSink(log_path) as sink:
        try:
            result = run_search(init, search_cfg, gen_e, gen_r, sink=sink, record_timing=cfg.output.record_timing)
        except TransportError as exc:
            raise CliError(f"generator transport failed: {exc} (partial log in {log_path})", EXIT_TRANSPORT) from None
    write_arch_file(out / "best.arch", result.best)
    summary = result.summary
    print(f"best (mu={summary.mu:.10g}):")
    print(summary.best, end="")
    transition = "none" if summary.transition_iteration is None else summary.transition_iteration
    print(f"iterations\t{summary.iterations}")
    print(f"transition_iteration\t{transition}")
    print(f"log\t{log_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    table_path = cfg.resolve(cfg.bench.table)
    table = None
    if table_path.exists():
        try:
            table = OracleTable.load(table_path, expect=cfg.bench_score)
            print(f"using cached oracle table {table_path} (config {config_hash(cfg.bench_score)})")
        except (ValueError, KeyError) as exc:
            print(f"ignoring cached table: {exc}")
    if table is None:
        table = tabulate(cfg.bench_score, workers=cfg.bench.workers)
        try:
            table.save(table_path)
        except OSError as exc:
            raise CliError(f"cannot write {table_path}: {exc.strerror}", EXIT_IO) from None
        print(f"tabulated {len(table)} architectures -> {table_path}")
    bench = cfg.bench_config()
    n = args.seeds if args.seeds is not None else bench.seeds
    first = cfg.seed
    report = run_bench(table, bench, seeds=range(first, first + n))
    report_path = out / "bench_report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"gamma_trans\t{report.gamma_trans:.10g}")
    print("seed\tphased_rank\texplore_only_rank")
    for seed, a, b in zip(range(first, first + n), report.ranks("phased"), report.ranks("explore_only")):
        print(f"{seed}\t{a}\t{b}")
    print(f"median\t{report.median_rank('phased')}\t{report.median_rank('explore_only')}")
    print(f"report\t{report_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phasenas", description="Phase-adaptive training-free architecture search")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False, file_arg=True):
        if file_arg:
            sp.add_argument("file")
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=[m.value for m in Mode])
        return sp

    common(sub.add_parser("validate", help="parse and validate an .arch file")).set_defaults(fn=cmd_validate)
    sp = common(sub.add_parser("estimate", help="params / FLOPs / depth of an .arch file"))
    sp.add_argument("--resolution", type=int, default=32)
    sp.set_defaults(fn=cmd_estimate)
    sp = common(sub.add_parser("score", help="training-free score of an .arch file"))
    sp.add_argument("--out", help="append the score record here (default <output.dir>/scores.jsonl)")
    sp.set_defaults(fn=cmd_score)
    sp = common(sub.add_parser("search", help="run the two-phase search"), config_required=True, file_arg=False)
    sp.add_argument("--generator", choices=["mock", "llm"])
    sp.set_defaults(fn=cmd_search)
    sp = common(sub.add_parser("bench", help="micro-space oracle benchmark"), config_required=True, file_arg=False)
    sp.add_argument("--seeds", type=int)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
