from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import sample_arch
from phasenas.arch_dsl import (
    CATALOG,
    ArchitectureSpec,
    BlockKind,
    BlockSpec,
    Mode,
    ParseError,
    SerializationError,
    ValidationCode,
    catalog_signature,
    parse_architecture,
    read_arch_file,
    serialize,
    validate,
    write_arch_file,
)
from phasenas.resource import ConstraintSet

VALID_TEXT = "ConvK3BNRELU(3,8,1,1)\nResK3K3(8,16,2,1)\nGAP(16,16,1,1)\nFC(16,10,1,1)\n"


def codes(errors):
    return [(e.code, e.position) for e in errors]


def test_parse_conv_block():
    arch = parse_architecture("ConvK3BNRELU(3,8,1,1)")
    assert arch.blocks == (BlockSpec(BlockKind.ConvK3BNRELU, 3, 8, 1, 1),)


def test_parse_residual_block():
    arch = parse_architecture("ResK3K3(16,32,2,1)")
    assert arch.blocks == (BlockSpec(BlockKind.ResK3K3, 16, 32, 2, 1),)


def test_wrong_arity_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_architecture("ConvK3BNRELU(3,8,1)")
    assert exc.value.line == 1
    assert "arity" in exc.value.message


def test_error_positions_on_later_lines():
    with pytest.raises(ParseError) as exc:
        parse_architecture("ConvK3BNRELU(3,8,1,1)\n  ResK3K3(8,x,1,1)")
    assert (exc.value.line, exc.value.column) == (2, 13)


@pytest.mark.parametrize(
    "text",
    [
        "Conv(3,8,1,1)",
        "ConvK3BNRELU(3,8,1,1,1)",
        "ConvK3BNRELU(3,8,1.5,1)",
        "ConvK3BNRELU(3,-8,1,1)",
        "ConvK3BNRELU 3,8,1,1",
        "ConvK3BNRELU(3,8,1,1) ResK3K3(8,8,1,1)",
        "ConvK3BNRELU(3,8,1,1)@Q3",
        "ConvK3BNRELU(3,8,1,1)@",
        "",
        "  # only a comment\n",
        "ConvK3BNRELU(3,8,1,1",
    ],
)
def test_rejects_outside_grammar(text):
    with pytest.raises(ParseError) as exc:
        parse_architecture(text)
    assert exc.value.line >= 1 and exc.value.column >= 1


def test_separators_comments_and_whitespace():
    text = "# stem\n ConvK3BNRELU( 3 , 8 ,1,1 ) ; ResK3K3(8,16,2,1)  # body\n\nGAP(16,16,1,1);FC(16,10,1,1)"
    assert parse_architecture(text) == parse_architecture(VALID_TEXT)


def test_round_trip_two_block_net():
    arch = parse_architecture(VALID_TEXT)
    assert serialize(arch) == VALID_TEXT
    assert parse_architecture(serialize(arch)) == arch


def test_tap_suffix():
    arch = parse_architecture("ConvK3BNRELU(3,8,2,1)@P3", Mode.DETECTION)
    assert arch.blocks[0].tap == "P3"
    assert serialize(arch) == "ConvK3BNRELU(3,8,2,1)@P3\n"


def test_empty_serialization_fails():
    with pytest.raises(SerializationError):
        serialize(ArchitectureSpec((), Mode.CLASSIFICATION))


def test_arch_file_round_trip(tmp_path):
    arch = parse_architecture(VALID_TEXT)
    path = tmp_path / "net.arch"
    write_arch_file(path, arch)
    assert path.read_bytes() == VALID_TEXT.encode()
    assert read_arch_file(path) == arch


def test_validate_clean_chain():
    assert validate(parse_architecture(VALID_TEXT)) == []


def test_validate_channel_mismatch():
    arch = parse_architecture("ConvK3BNRELU(3,8,1,1)\nResK3K3(16,32,2,1)\nGAP(32,32,1,1)\nFC(32,10,1,1)")
    errors = validate(arch)
    assert codes(errors) == [(ValidationCode.ChannelMismatch, 1)]
    assert "expected in=8" in errors[0].detail


def test_validate_mode_violation():
    arch = parse_architecture("ConvK3BNRELU(3,8,1,1)\nSCDown(8,16,2,1)\nGAP(16,16,1,1)\nFC(16,10,1,1)")
    assert codes(validate(arch)) == [(ValidationCode.ModeViolation, 1)]


def test_validate_head_and_taps():
    assert [e.code for e in validate(parse_architecture("ConvK3BNRELU(3,8,1,1)"))] == [ValidationCode.HeadMissing]
    det = parse_architecture("ConvK3BNRELU(3,8,1,1)", Mode.DETECTION)
    assert [e.code for e in validate(det)] == [ValidationCode.NoTaps]
    dup = parse_architecture("ConvK3BNRELU(3,8,1,1)@P3\nConvK3BNRELU(8,8,1,1)@P3", Mode.DETECTION)
    assert codes(validate(dup)) == [(ValidationCode.IllegalParameter, 1)]


def test_validate_block_parameter_rules():
    det = parse_architecture(
        "SCDown(3,8,1,1)@P1\nPSA(8,16,1,1)\nPSA(16,16,2,1)\nConvK3BNRELU(16,16,1,0)", Mode.DETECTION
    )
    assert codes(validate(det)) == [
        (ValidationCode.IllegalParameter, 0),
        (ValidationCode.IllegalParameter, 1),
        (ValidationCode.IllegalParameter, 2),
        (ValidationCode.IllegalParameter, 3),
    ]
    cls = parse_architecture("ConvK3BNRELU(3,8,1,1)\nGAP(8,8,2,1)\nFC(8,10,1,2)")
    assert codes(validate(cls)) == [(ValidationCode.IllegalParameter, 1), (ValidationCode.IllegalParameter, 2)]


def test_validate_depth_limit():
    arch = parse_architecture(VALID_TEXT)
    assert validate(arch, ConstraintSet(max_depth=4)) == []
    assert [e.code for e in validate(arch, ConstraintSet(max_depth=3))] == [ValidationCode.DepthExceeded]


def test_catalog_signatures():
    conv = catalog_signature(BlockKind.ConvK3BNRELU)
    assert (conv.kernels, conv.arity, conv.modes) == ((3,), 4, frozenset(Mode))
    psa = catalog_signature("PSA")
    assert (psa.arity, psa.modes, psa.strides) == (4, frozenset({Mode.DETECTION}), frozenset({1}))
    bottleneck = catalog_signature(BlockKind.ResK1K3K1)
    assert (bottleneck.kernels, bottleneck.arity, bottleneck.modes) == ((1, 3, 1), 4, frozenset(Mode))
    assert set(CATALOG) == set(BlockKind)


def test_ten_classification_kinds_besides_identity():
    admissible = {k for k, sig in CATALOG.items() if Mode.CLASSIFICATION in sig.modes}
    assert len(admissible - {BlockKind.Identity}) == 10


# ---------------------------------------------------------------------------
# properties

kinds = st.sampled_from(list(BlockKind))
block_specs = st.builds(
    BlockSpec,
    kinds,
    st.integers(1, 512),
    st.integers(1, 512),
    st.sampled_from([1, 2]),
    st.integers(1, 9),
    st.one_of(st.none(), st.integers(0, 99).map(lambda k: f"P{k}")),
)


@given(st.lists(block_specs, min_size=1, max_size=12), st.sampled_from(list(Mode)))
def test_round_trip_arbitrary_blocks(blocks, mode):
    arch = ArchitectureSpec(tuple(blocks), mode)
    assert parse_architecture(serialize(arch), mode) == arch


def _rescan_ok(arch):
    prev = arch.input_channels
    for b in arch.blocks:
        sig = CATALOG[b.kind]
        if b.in_channels != prev or arch.mode not in sig.modes or b.stride not in sig.strides:
            return False
        if sig.same_channels and b.in_channels != b.out_channels:
            return False
        if b.repeats < 1 or (sig.fixed_repeats and b.repeats != 1):
            return False
        prev = b.out_channels
    return True


@given(st.lists(block_specs, min_size=1, max_size=6), st.sampled_from(list(Mode)))
def test_validator_soundness_random_blocks(blocks, mode):
    arch = ArchitectureSpec(tuple(blocks), mode)
    if validate(arch) == []:
        assert _rescan_ok(arch)


@settings(max_examples=300)
@given(st.integers(0, 2**32), st.sampled_from(list(Mode)))
def test_validator_soundness_sampled(seed, mode):
    arch = sample_arch(seed, mode)
    assert validate(arch) == []
    assert _rescan_ok(arch)


@settings(max_examples=300)
@given(st.integers(0, 2**32), st.sampled_from(list(Mode)), st.data())
def test_single_channel_fault_is_reported_once(seed, mode, data):
    arch = sample_arch(seed, mode)
    i = data.draw(st.integers(0, len(arch.blocks) - 1))
    b = arch.blocks[i]
    bad = data.draw(st.integers(1, 600).filter(lambda c: c != b.in_channels))
    blocks = list(arch.blocks)
    blocks[i] = replace(b, in_channels=bad)
    errors = validate(arch.with_blocks(blocks))
    mismatches = [e for e in errors if e.code is ValidationCode.ChannelMismatch]
    assert [e.position for e in mismatches] == [i]


@settings(max_examples=500)
@given(st.binary(max_size=200))
def test_parser_never_crashes_on_bytes(raw):
    text = raw.decode("utf-8", errors="replace")
    try:
        parse_architecture(text)
    except ParseError as exc:
        assert exc.line >= 1 and exc.column >= 1


@settings(max_examples=300)
@given(st.text(alphabet="ConvK3BNRELUResGAPFC()@P,;#\n 0123456789", max_size=80))
def test_parser_never_crashes_on_near_grammar_text(text):
    try:
        parse_architecture(text)
    except ParseError:
        pass
