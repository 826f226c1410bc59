import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inddos.errors import ConfigError
from inddos.hashing import REGISTRY, crc32, key_bytes
from inddos.sketch import BaconSketch, CountMinSketch, DirectBitmap, SketchParams, concat_index
from oracles import NaiveBacon, crc_bitwise, exact_counts


def naive_for(params):
    fam = params.family
    return NaiveBacon(params.d, params.w, params.m, fam.rows, fam.bitmap, params.src_key_width, params.salt)


def random_packets(rng, npk, nsrc, ndst):
    src = rng.integers(0, 2**32, size=nsrc, dtype=np.uint64)
    dst = rng.integers(0, 2**32, size=ndst, dtype=np.uint64)
    return src[rng.integers(0, nsrc, size=npk)], dst[rng.integers(0, ndst, size=npk)]


# -- Direct Bitmap -----------------------------------------------------------


def test_bitmap_basics():
    bm = DirectBitmap(1024)
    assert bm.estimate() == 0
    bm.update(42)
    bm.update(42)
    assert bm.estimate() == 1


def test_bitmap_300_keys_matches_occupancy_oracle():
    keys = np.random.default_rng(0).choice(2**32, size=300, replace=False)
    bm = DirectBitmap(1024)
    bm.update_many(keys)
    spec = REGISTRY["crc32"]
    occupied = {crc_bitwise(key_bytes(int(k)), spec.poly, spec.reflected, spec.init, spec.xor_out) % 1024 for k in keys}
    assert bm.estimate() == len(occupied)
    # expected occupancy 1024 * (1 - exp(-300/1024)) is about 261
    assert 230 <= bm.estimate() <= 300


def test_bitmap_saturates():
    bm = DirectBitmap(64)
    bm.update_many(np.random.default_rng(1).integers(0, 2**32, size=640, dtype=np.uint64))
    assert bm.estimate() == 64


def test_bitmap_single_and_batch_agree():
    keys = np.random.default_rng(2).integers(0, 2**32, size=200, dtype=np.uint64)
    a, b = DirectBitmap(128), DirectBitmap(128)
    for k in keys:
        a.update(int(k))
    b.update_many(keys)
    assert (a.bits == b.bits).all()


# -- Count-min -------------------------------------------------------------


def test_cms_fresh_and_repeat():
    cms = CountMinSketch(3, 1024)
    assert cms.query(7) == 0
    for _ in range(5):
        cms.update(7)
    assert cms.query(7) == 5


def test_cms_overestimates_only():
    rng = np.random.default_rng(4)
    keys = rng.integers(0, 2**32, size=1000, dtype=np.uint64)
    cms = CountMinSketch(3, 1024)
    cms.update_many(keys)
    uniq, counts = np.unique(keys, return_counts=True)
    est = np.array([cms.query(int(k)) for k in uniq])
    assert (est >= counts).all()
    # a key is exact unless every row collides with one of the other keys
    k = len(uniq)
    expected = 1 - (1 - (1 - 1 / 1024) ** (k - 1)) ** 3
    assert abs((est == counts).mean() - expected) < 0.05


# -- addressing ----------------------------------------------------------------


def test_concat_index_examples():
    p = SketchParams(d=1, w=1024, m=1024, hardware_mode=True)
    assert concat_index(3, 2, p) == (0, 2051)
    assert concat_index(1023, 1023, p) == (7, 131071)
    small = SketchParams(d=1, w=4, m=8)
    assert concat_index(3, 2, small) == (0, 19)


@given(st.integers(0, 12), st.integers(0, 12), st.data())
def test_concat_index_identity(lm, lw, data):
    m, w = 1 << max(lm, 1), 1 << lw
    p = SketchParams(d=1, w=w, m=m)
    b = data.draw(st.integers(0, m - 1))
    s = data.draw(st.integers(0, w - 1))
    label, offset = concat_index(b, s, p)
    assert label * 2**17 + offset == s * m + b
    assert offset < 2**17


def test_concat_index_rejects_non_power_of_two():
    with pytest.raises(ConfigError):
        concat_index(0, 0, SketchParams(d=1, w=6, m=8))
    with pytest.raises(ConfigError):
        SketchParams(w=1000, m=1024, hardware_mode=True)


def test_register_layout():
    assert SketchParams(w=1024, m=1024).register_layout == (8, 2**17)
    assert SketchParams(w=64, m=64).register_layout == (1, 4096)


def test_flat_index_from_hashes():
    p = SketchParams(d=1, w=4, m=8)
    sk = BaconSketch(p)
    rng = np.random.default_rng(5)
    src = next(int(k) for k in rng.integers(0, 2**32, size=10_000) if sk.bucket(int(k)) == 3)
    dst = next(int(k) for k in rng.integers(0, 2**32, size=10_000) if sk.segments(int(k))[0] == 2)
    assert crc32(REGISTRY["crc32"], key_bytes(src)) % 8 == 3
    sk.update(src, dst)
    assert np.flatnonzero(sk.bit_planes()[0]).tolist() == [19]


# -- BACON update and query --------------------------------------------------


def test_first_packet_and_idempotence():
    sk = BaconSketch(SketchParams(d=3, w=64, m=64))
    out = sk.update(1, 2)
    assert out.flipped == (True, True, True)
    assert out.estimate == 1
    assert (sk.aux.sum(axis=1) == 1).all()
    before = sk.to_bytes()
    again = sk.update(1, 2)
    assert again.flipped == (False, False, False)
    assert sk.to_bytes() == before
    sk.update_many(np.array([1, 1]), np.array([2, 2]))
    assert sk.to_bytes() == before


def test_fresh_and_reset():
    sk = BaconSketch(SketchParams(d=2, w=16, m=32))
    assert sk.query(99) == 0
    sk.update(5, 6)
    fresh = BaconSketch(sk.params)
    fresh.update(7, 8)
    sk.reset()
    sk.reset()
    assert sk.query(6) == 0
    sk.update(7, 8)
    assert sk.to_bytes() == fresh.to_bytes()


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(1, 64),
    st.integers(2, 64),
    st.integers(0, 2**31),
    st.integers(1, 400),
)
def test_query_matches_naive_scan(d, w, m, seed, npk):
    params = SketchParams(d=d, w=w, m=m)
    rng = np.random.default_rng(seed)
    src, dst = random_packets(rng, npk, 60, 12)
    sk = BaconSketch(params)
    naive = naive_for(params)
    for s, t in zip(src.tolist(), dst.tolist()):
        est = sk.update(s, t).estimate
        naive.update(s, t)
        assert est == naive.query(t)
    for t in set(dst.tolist()):
        assert sk.query(t) == naive.query(t)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 64), st.integers(2, 64), st.integers(0, 2**31))
def test_aux_is_exact_popcount(d, w, m, seed):
    params = SketchParams(d=d, w=w, m=m)
    rng = np.random.default_rng(seed)
    src, dst = random_packets(rng, 300, 100, 20)
    sk = BaconSketch(params)
    sk.update_many(src, dst)
    pops = sk.bit_planes().reshape(d, w, m).sum(axis=2)
    assert (sk.aux == pops).all()
    assert ((sk.aux >= 0) & (sk.aux <= m)).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 32), st.integers(2, 64), st.integers(0, 2**31), st.booleans())
def test_batch_estimates_match_sequential(d, w, m, seed, prefill):
    params = SketchParams(d=d, w=w, m=m)
    rng = np.random.default_rng(seed)
    src, dst = random_packets(rng, 300, 50, 10)
    a, b = BaconSketch(params), BaconSketch(params)
    if prefill:
        a.update_many(src[:50], dst[:50])
        b.update_many(src[:50], dst[:50])
    seq = [a.update(s, t).estimate for s, t in zip(src.tolist(), dst.tolist())]
    batch = b.update_many(src, dst, return_estimates=True)
    assert batch.tolist() == seq
    assert a.to_bytes() == b.to_bytes()


def test_single_destination_without_collisions():
    params = SketchParams(d=3, w=64, m=1024)
    sk = BaconSketch(params)
    srcs = np.arange(1, 41, dtype=np.uint64)
    sk.update_many(srcs, np.full(40, 77, dtype=np.uint64))
    naive = naive_for(params)
    for s in srcs.tolist():
        naive.update(s, 77)
    assert sk.query(77) == naive.query(77) <= 40


def test_overestimate_bounded_by_foreign_sources():
    params = SketchParams(d=3, w=8, m=4096)
    rng = np.random.default_rng(6)
    src, dst = random_packets(rng, 3000, 800, 40)
    sk = BaconSketch(params)
    sk.update_many(src, dst)
    truth = exact_counts(zip(src.tolist(), dst.tolist()))
    segs = sk.segments_array(np.array(list(truth), dtype=np.uint64))
    all_segs = sk.segments_array(dst)
    for j, t in enumerate(truth):
        est = sk.query(t)
        # sources written into the destination's segment in each row
        per_row = [len(set(src[all_segs[i] == segs[i, j]].tolist())) for i in range(params.d)]
        assert est <= min(per_row)
        assert est <= params.m


def test_degenerate_single_cell():
    params = SketchParams(d=1, w=1, m=2)
    sk = BaconSketch(params)
    sk.update_many(np.arange(50, dtype=np.uint64), np.arange(50, dtype=np.uint64) % 3)
    assert sk.query(0) == sk.query(1) == 2


def test_large_d_needs_perturbation():
    with pytest.raises(ConfigError):
        SketchParams(d=5)
    sk = BaconSketch(SketchParams(d=6, w=16, m=16, allow_perturbation=True))
    sk.update(1, 2)
    assert sk.query(2) == 1


# -- hardware mode and serialization -----------------------------------------


@pytest.mark.parametrize("lm,lw", [(5, 5), (10, 8), (9, 9), (10, 10)])
def test_hardware_mode_bit_identical(lm, lw):
    rng = np.random.default_rng(lm * 100 + lw)
    src, dst = random_packets(rng, 5000, 2000, 200)
    plain = BaconSketch(SketchParams(d=3, w=1 << lw, m=1 << lm))
    hw = BaconSketch(SketchParams(d=3, w=1 << lw, m=1 << lm, hardware_mode=True))
    e1 = plain.update_many(src, dst, return_estimates=True)
    e2 = hw.update_many(src, dst, return_estimates=True)
    assert (e1 == e2).all()
    assert (plain.bit_planes() == hw.bit_planes()).all()
    assert (plain.aux == hw.aux).all()
    for s, t in zip(src[:50].tolist(), dst[:50].tolist()):
        assert plain.update(s, t) == hw.update(s, t)


def test_dump_round_trip():
    params = SketchParams(d=2, w=32, m=24)
    sk = BaconSketch(params)
    src, dst = random_packets(np.random.default_rng(8), 500, 100, 30)
    sk.update_many(src, dst)
    blob = sk.to_bytes()
    assert blob[:4] == b"BACN"
    assert len(blob) == 16 + 2 * (32 * 24 // 8) + 2 * 32 * 4
    back = BaconSketch.from_bytes(blob, params)
    assert (back.aux == sk.aux).all()
    assert (back.bit_planes() == sk.bit_planes()).all()
    with pytest.raises(ConfigError):
        BaconSketch.from_bytes(blob, SketchParams(d=2, w=32, m=32))


def test_salt_changes_layout_but_not_exactness():
    src, dst = random_packets(np.random.default_rng(9), 400, 100, 20)
    a = BaconSketch(SketchParams(d=2, w=16, m=32))
    b = BaconSketch(SketchParams(d=2, w=16, m=32, salt=b"\x01\x02\x03\x04"))
    a.update_many(src, dst)
    b.update_many(src, dst)
    assert a.to_bytes() != b.to_bytes()
    naive = naive_for(b.params)
    for s, t in zip(src.tolist(), dst.tolist()):
        naive.update(s, t)
    assert all(b.query(t) == naive.query(t) for t in set(dst.tolist()))


def test_invalid_params():
    with pytest.raises(ConfigError):
        SketchParams(d=0)
    with pytest.raises(ConfigError):
        SketchParams(d=2, row_hashes=("crc32c",))
    with pytest.raises(ConfigError):
        SketchParams(d=1, row_hashes=("sha1",))
