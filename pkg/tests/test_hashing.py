import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inddos.errors import ConfigError
from inddos.hashing import (
    REGISTRY,
    Crc32Spec,
    crc32,
    crc32_array,
    get_spec,
    hash_family,
    hash_keys,
    key_bytes,
    key_matrix,
    key_width,
    make_keys,
    perturbed_spec,
)
from oracles import crc_bitwise

CHECK = b"123456789"
# published catalogue check values for the nine polynomials we ship
CATALOGUE = {
    "crc32": 0xCBF43926,
    "crc32c": 0xE3069283,
    "crc32d": 0x87315576,
    "crc32q": 0x3010BF7F,
    "crc32mpeg": 0x0376E6E7,
}
EXTRA = {0: 0x2D3DD0AE, 1: 0x1697D06A, 2: 0xBD0BE338, 3: 0x6EC2EDC4}


@pytest.mark.parametrize("name,value", sorted(CATALOGUE.items()))
def test_catalogue_check_values(name, value):
    assert crc32(get_spec(name), CHECK) == value


@pytest.mark.parametrize("index,value", sorted(EXTRA.items()))
def test_extra_polynomials_check_values(index, value):
    assert perturbed_spec(index)(CHECK) == value


def test_registry_order_and_distinct_outputs():
    assert list(REGISTRY) == ["crc32", "crc32c", "crc32d", "crc32q", "crc32mpeg"]
    outs = {s(CHECK) for s in REGISTRY.values()}
    assert len(outs) == 5


@given(st.binary(max_size=40))
def test_crc32_matches_zlib(data):
    assert crc32(REGISTRY["crc32"], data) == zlib.crc32(data)


@settings(max_examples=60)
@given(st.binary(max_size=24), st.sampled_from(sorted(REGISTRY)))
def test_table_driven_matches_bitwise(data, name):
    s = REGISTRY[name]
    assert crc32(s, data) == crc_bitwise(data, s.poly, s.reflected, s.init, s.xor_out)


@settings(max_examples=30)
@given(st.lists(st.integers(0, 2**32 - 1), min_size=1, max_size=50), st.binary(max_size=4))
def test_vectorized_matches_scalar(keys, salt):
    keys = np.array(keys, dtype=np.uint64)
    for s in REGISTRY.values():
        vec = hash_keys(s, keys, 4, salt)
        ref = [crc32(s, key_bytes(int(k), 4) + salt) for k in keys]
        assert vec.tolist() == ref
        assert crc32_array(s, key_matrix(keys, 4, salt)).tolist() == ref


def test_avalanche_single_bit_flip():
    rng = np.random.default_rng(3)
    keys = rng.integers(0, 2**32, size=500, dtype=np.uint64)
    flips = keys ^ (np.uint64(1) << rng.integers(0, 32, size=500).astype(np.uint64))
    for s in REGISTRY.values():
        diff = hash_keys(s, keys) ^ hash_keys(s, flips)
        bits = np.unpackbits(diff.view(np.uint8)).sum() / diff.size
        # CRC is linear, so a flipped input bit always changes several output bits
        assert 8 < bits < 24
        assert (diff != 0).all()


def test_family_assignment():
    fam = hash_family(3)
    assert fam.bitmap.name == "crc32"
    assert [s.name for s in fam.rows] == ["crc32c", "crc32d", "crc32q"]
    assert [s.name for s in hash_family(4).rows][-1] == "crc32mpeg"


def test_family_beyond_registry():
    with pytest.raises(ConfigError):
        hash_family(5)
    rows = hash_family(9, allow_perturbation=True).rows
    assert len(rows) == 9
    assert len({s.poly for s in rows} | {REGISTRY["crc32"].poly}) >= 9
    assert len({s(CHECK) for s in rows}) == 9


def test_perturbed_is_deterministic():
    assert perturbed_spec(7) == perturbed_spec(7)
    assert perturbed_spec(7).poly != perturbed_spec(8).poly


def test_bad_spec_and_names():
    with pytest.raises(ConfigError):
        Crc32Spec("bad", 0x04C11DB7, True, 0, 0)
    with pytest.raises(ConfigError):
        get_spec("md5")
    with pytest.raises(ConfigError):
        key_width("mac")


def test_key_serialization():
    assert key_bytes(0x0A000001) == b"\x0a\x00\x00\x01"
    keys = make_keys(np.array([0x0A000001]), np.array([80]))
    assert int(keys[0]) == (0x0A000001 << 16) | 80
    assert key_matrix(keys, 6)[0].tobytes() == b"\x0a\x00\x00\x01\x00\x50"
