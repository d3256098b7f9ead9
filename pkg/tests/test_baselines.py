import binascii
import csv
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import crc_longdiv, hamming_parity_count
from radarlab.baselines import (CATALOGUE, CHECK_VALUES, CRC16_XMODEM, CRC32_ISO_HDLC, DETECT_CRCS, CrcSpec,
                                code_storage_compare, code_width, crc_bits, crc_blocks, crc_compute, crc_reference,
                                detect_with_crc, golden_crcs, poly_order, secded_overhead, write_comparison_csv)
from radarlab.codec import LayerConfig, bits_to_kb, load_architecture, storage_overhead
from radarlab.qnn import DenseLayer, QuantizedModel, QuantizedTensor, flip_bit

CHECK = b"123456789"


@pytest.mark.parametrize("name", sorted(CATALOGUE))
def test_published_check_values(name):
    spec = CATALOGUE[name]
    assert crc_compute(CHECK, spec) == CHECK_VALUES[name]
    assert crc_reference(CHECK, spec) == CHECK_VALUES[name]


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=64))
def test_against_stdlib_crcs(data):
    assert crc_compute(data, CRC32_ISO_HDLC) == zlib.crc32(data)
    assert crc_compute(data, CRC16_XMODEM) == binascii.crc_hqx(data, 0)


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=40), st.sampled_from(sorted(CATALOGUE)))
def test_table_route_matches_bitwise_route(data, name):
    spec = CATALOGUE[name]
    assert crc_compute(data, spec) == crc_reference(data, spec)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=200), st.sampled_from([7, 10, 13]))
def test_bitwise_crc_is_polynomial_remainder(bits, width):
    spec = DETECT_CRCS[width]
    assert crc_bits(bits, spec) == crc_longdiv(bits, spec.generator, width)


@settings(max_examples=60, deadline=None)
@given(st.data(), st.integers(1, 32), st.sampled_from([7, 10, 13]))
def test_crc_linearity(data, n, width):
    a = data.draw(st.binary(min_size=n, max_size=n))
    b = data.draw(st.binary(min_size=n, max_size=n))
    x = bytes(p ^ q for p, q in zip(a, b))
    spec = DETECT_CRCS[width]
    assert crc_compute(x, spec) == crc_compute(a, spec) ^ crc_compute(b, spec)


def test_zero_data_zero_init_gives_zero():
    for spec in DETECT_CRCS.values():
        assert crc_compute(bytes(16), spec) == 0


def test_every_single_and_double_bit_error_changes_the_crc():
    rng = np.random.default_rng(0)
    block = rng.integers(0, 256, size=8, dtype=np.uint8)  # 64-bit block
    for spec in DETECT_CRCS.values():
        base = crc_compute(block.tobytes(), spec)
        errs = []
        for i in range(64):
            e = block.copy()
            e[i // 8] ^= 1 << (i % 8)
            errs.append(e)
        crcs = crc_blocks(np.array(errs), spec)
        assert (crcs != base).all()
        for i in range(64):
            for j in range(i + 1, 64):
                e = block.copy()
                e[i // 8] ^= 1 << (i % 8)
                e[j // 8] ^= 1 << (j % 8)
                assert crc_compute(e.tobytes(), spec) != base


def test_detection_generators_are_primitive():
    assert poly_order(DETECT_CRCS[7]) == 127
    assert poly_order(DETECT_CRCS[10]) == 1023
    assert poly_order(DETECT_CRCS[13]) == 8191


def test_crcspec_validation():
    with pytest.raises(ValueError):
        CrcSpec(7, 0x80)
    with pytest.raises(ValueError):
        CrcSpec(7, 0x08)
    with pytest.raises(ValueError):
        crc_compute(b"", DETECT_CRCS[7])


@pytest.mark.parametrize("n,r", [(1, 2), (4, 3), (11, 4), (64, 7), (120, 7), (4096, 13)])
def test_secded_overhead(n, r):
    assert secded_overhead(n) == r == hamming_parity_count(n)


def test_secded_matches_layout_oracle_everywhere():
    for n in range(1, 5000):
        assert secded_overhead(n) == hamming_parity_count(n)
    with pytest.raises(ValueError):
        secded_overhead(0)


def test_code_widths():
    assert code_width("radar2", 8) == 2 and code_width("radar3", 8) == 3
    assert code_width("crc13", 512) == 13 and code_width("parity", 8) == 1
    assert code_width("hamming", 8) == 7 and code_width("hamming", 512) == 13
    with pytest.raises(ValueError):
        code_width("md5", 8)


def test_storage_table_values():
    r18 = [n for _, n in load_architecture("resnet18")]
    r20 = [n for _, n in load_architecture("resnet20")]
    t18 = {r["code"]: r for r in code_storage_compare(r18, 512, ("radar2", "crc13"))}
    t20 = {r["code"]: r for r in code_storage_compare(r20, 8, ("radar2", "crc7"))}
    assert t18["crc13"]["total_kb"] == pytest.approx(36.4, rel=0.10)
    assert t18["radar2"]["total_kb"] == pytest.approx(5.6, rel=0.10)
    assert t20["crc7"]["total_kb"] == pytest.approx(28.7, rel=0.10)
    assert t20["radar2"]["total_kb"] == pytest.approx(8.2, rel=0.10)
    assert t18["radar2"]["total_kb"] == bits_to_kb(storage_overhead(r18, LayerConfig(512)))


@pytest.mark.parametrize("arch", ["resnet18", "resnet20"])
def test_signature_storage_never_exceeds_crc(arch):
    sizes = [n for _, n in load_architecture(arch)]
    for G in (8, 16, 32, 64, 128, 256, 512, 1024):
        rows = {r["code"]: r["total_kb"] for r in code_storage_compare(sizes, G, ("radar2", "radar3", "crc7"))}
        assert rows["radar2"] <= rows["radar3"] <= rows["crc7"]


def test_comparison_csv(tmp_path):
    rows = code_storage_compare([1000], 8, ("radar2", "crc7"), detection={"crc7": 10.0})
    path = tmp_path / "t.csv"
    write_comparison_csv(rows, path)
    with open(path) as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == ["code", "width", "group_size", "total_kb", "detection_ratio"]
    assert got[0]["detection_ratio"] == "" and float(got[1]["detection_ratio"]) == 10.0


def crc_model(n=512, seed=0):
    vals = np.random.default_rng(seed).integers(-128, 128, size=n).astype(np.int8)
    return QuantizedModel([DenseLayer(QuantizedTensor(vals.reshape(8, -1).copy(), 1.0), np.zeros(8))])


def test_crc_detector_clean_and_every_single_flip():
    model = crc_model()
    spec = DETECT_CRCS[7]
    golden = golden_crcs(model, spec, 8)
    assert detect_with_crc(model, golden, spec, 8).n_flagged == 0
    for idx in range(512):
        for bit in range(8):
            flip_bit(model, 0, idx, bit)
            assert detect_with_crc(model, golden, spec, 8).flagged[0] == {idx // 8}
            flip_bit(model, 0, idx, bit)


def test_crc_detector_catches_cancelling_msb_pair():
    model = crc_model()
    w = model.int_weights(0)
    w[0], w[1] = 5, -5
    spec = DETECT_CRCS[13]
    golden = golden_crcs(model, spec, 64)
    flip_bit(model, 0, 0, 7)
    flip_bit(model, 0, 1, 7)
    rep = detect_with_crc(model, golden, spec, 64, [type("F", (), {"layer": 0, "flat_index": i})() for i in (0, 1)])
    assert rep.flagged[0] == {0} and rep.flip_detected == [True, True]
