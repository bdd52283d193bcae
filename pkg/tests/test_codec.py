import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_quantized
from sgsplat.codec import (
    Bitstream,
    bpp,
    canonicalize,
    count_width,
    decode,
    encode,
    load_scene,
    pack_codes,
    payload_bits,
    read_stream,
    save_scene,
    scene_from_bytes,
    scene_to_bytes,
    unpack_codes,
    write_stream,
)
from sgsplat.exceptions import CorruptionError, ImageFormatError, SplatError
from sgsplat.quantization import QuantizedScene, RvqCodebook
from sgsplat.splat import GaussianScene, render

seeds = st.integers(0, 2 ** 32 - 1)

PAYLOAD = ("positions", "covariance", "colors")


def _one_gaussian(codes=(5, 40, 63), bits=6):
    book = RvqCodebook(np.zeros((1, 2, 3)))
    return QuantizedScene(16, 16, 12, (-1.0, 1.0), np.array([[100, 4000]]), np.array([0.5, -1.0, 0.25]),
                          np.array([3.5, 1.0, 2.25]), np.array([bits]), np.array([codes]), book,
                          np.array([[1]]), (6, 16))


@given(seeds)
def test_pack_unpack_round_trip(seed):
    rng = np.random.default_rng(seed)
    widths = rng.integers(0, 31, int(rng.integers(0, 60)))
    codes = rng.integers(0, 2 ** widths)
    buf = pack_codes(codes, widths)
    assert len(buf) == (int(widths.sum()) + 7) // 8
    np.testing.assert_array_equal(unpack_codes(buf, widths), codes)


def test_pack_msb_first():
    assert pack_codes([1, 2], [1, 3]) == bytes([0b10100000])
    assert pack_codes([0xABC], 12) == bytes([0xAB, 0xC0])


def test_pack_rejects_overflow():
    with pytest.raises(SplatError, match="invariant"):
        pack_codes([8], 3)
    with pytest.raises(SplatError):
        pack_codes([-1], 3)


def test_single_gaussian_layout():
    q = _one_gaussian()
    bs = encode(q)
    assert bs.section_bytes("covariance") == 3
    off, _ = bs.sections["covariance"]
    word = int.from_bytes(bs.data[off:off + 3], "big")
    assert word == ((5 << 12) | (40 << 6) | 63) << 6
    # ten explicit slot counts of one bit each; the last slot is implied
    assert bs.section_bytes("groups") == 2
    qd, scene = decode(bs)
    assert qd.cov_bits.tolist() == [6]
    lo = np.float32([0.5, -1.0, 0.25]).astype(np.float64)
    hi = np.float32([3.5, 1.0, 2.25]).astype(np.float64)
    s = (hi - lo) / 63
    np.testing.assert_array_equal(scene.chol[0], s * np.array([5, 40, 63]) + lo)


def test_empty_scene_header_only():
    q = random_quantized(np.random.default_rng(0), n=0, width=768, height=512)
    bs = encode(q)
    assert list(bs.sections) == ["header"]
    assert bpp(bs, 768, 512) < 0.001
    qd, scene = decode(bs)
    assert len(qd) == 0 and len(scene) == 0
    assert not render(scene).any()


def test_bpp_examples():
    assert bpp(Bitstream(b"\0" * 1000), 100, 80) == 1.0
    assert bpp(b"\0" * 10, 10, 8) == 1.0


@given(seeds)
def test_round_trip_bit_exact(seed):
    q = random_quantized(np.random.default_rng(seed))
    bs = encode(q)
    qd, scene = decode(bs)
    ref = canonicalize(q)
    for name in ("pos_codes", "cov_bits", "cov_codes", "color_indices", "cov_min", "cov_max"):
        np.testing.assert_array_equal(getattr(qd, name), getattr(ref, name))
    np.testing.assert_array_equal(qd.codebook.stages, ref.codebook.stages)
    expect = ref.dequantize()
    np.testing.assert_array_equal(scene.mu, expect.mu)
    np.testing.assert_array_equal(scene.chol, expect.chol)
    np.testing.assert_array_equal(scene.color, expect.color)


@given(seeds)
def test_encode_deterministic_and_canonical(seed):
    q = random_quantized(np.random.default_rng(seed))
    a = encode(q).data
    assert encode(q).data == a
    assert encode(canonicalize(q)).data == a
    assert encode(decode(a)[0]).data == a


@given(seeds)
def test_stream_size_formula(seed):
    q = random_quantized(np.random.default_rng(seed), n=int(np.random.default_rng(seed).integers(1, 300)))
    bs = encode(q)
    n = len(q)
    s, k, c = q.codebook.stages.shape
    log2k = k.bit_length() - 1
    assert bs.section_bytes("covariance") == (3 * int(q.cov_bits.sum()) + 7) // 8
    assert bs.section_bytes("positions") == (2 * n * q.pos_bits + 7) // 8
    assert bs.section_bytes("colors") == (n * s * log2k + 7) // 8
    assert sum(bs.section_bytes(x) for x in PAYLOAD) * 8 - payload_bits(q) in range(0, 3 * 8)
    slots = q.bit_range[1] - q.bit_range[0] + 1
    assert bs.section_bytes("groups") == ((slots - 1) * count_width(n) + 7) // 8
    assert len(bs) == sum(length for _, length in bs.sections.values())


def test_payload_linear_in_count():
    rng = np.random.default_rng(3)
    base = random_quantized(rng, n=200)
    twice = QuantizedScene(
        base.width, base.height, base.pos_bits, base.pos_range,
        np.vstack([base.pos_codes] * 2), base.cov_min, base.cov_max, np.tile(base.cov_bits, 2),
        np.vstack([base.cov_codes] * 2), base.codebook, np.hstack([base.color_indices] * 2), base.bit_range)
    assert payload_bits(twice) == 2 * payload_bits(base)


@given(seeds)
def test_render_of_decoded_equals_pre_encode(seed):
    q = random_quantized(np.random.default_rng(seed), width=24, height=20)
    assume_ok = len(q) == 0 or q.dequantize().chol[:, [0, 2]].min() > 0
    if not assume_ok:
        return
    _, scene = decode(encode(q))
    np.testing.assert_array_equal(render(scene), render(canonicalize(q).dequantize()))


def test_bad_magic_and_version():
    data = bytearray(encode(_one_gaussian()).data)
    data[0] ^= 0x01
    with pytest.raises(ImageFormatError, match="magic"):
        decode(bytes(data))
    data[0] ^= 0x01
    data[4] = 9
    with pytest.raises(ImageFormatError, match="version"):
        decode(bytes(data))


def test_truncation_reports_offset_and_section():
    data = encode(random_quantized(np.random.default_rng(5), n=50)).data
    for cut in (3, 10, 30, len(data) // 2, len(data) - 1):
        with pytest.raises((CorruptionError, ImageFormatError)) as err:
            decode(data[:cut])
        if isinstance(err.value, CorruptionError):
            assert err.value.offset is not None and err.value.section
    with pytest.raises(CorruptionError) as err:
        decode(data[:-1])
    assert err.value.section == "colors" and "byte" in str(err.value)


def test_trailing_bytes_rejected():
    with pytest.raises(CorruptionError):
        decode(encode(_one_gaussian()).data + b"\0")


def test_stream_file_round_trip(tmp_path):
    bs = encode(random_quantized(np.random.default_rng(6), n=20))
    path = tmp_path / "x.gs2c"
    write_stream(path, bs)
    assert read_stream(path).data == bs.data


def test_scene_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    scene = GaussianScene(rng.uniform(-1, 1, (9, 2)), rng.uniform(0.5, 2, (9, 3)), rng.uniform(size=(9, 1)), 10, 12)
    path = tmp_path / "s.scene"
    save_scene(path, scene)
    back = load_scene(path)
    assert (back.width, back.height, back.channels) == (10, 12, 1)
    np.testing.assert_array_equal(back.mu, scene.mu.astype(np.float32))
    empty = scene_from_bytes(scene_to_bytes(GaussianScene.empty(3, 4)))
    assert len(empty) == 0
    with pytest.raises(ImageFormatError):
        scene_from_bytes(encode(_one_gaussian()).data)
    with pytest.raises(CorruptionError):
        scene_from_bytes(scene_to_bytes(scene)[:-2])
