import struct

import numpy as np
import pytest

from selkd.cache import (
    HEADER_BYTES,
    SENTINEL_BYTES,
    CacheReader,
    CacheWriter,
    decode_position,
    encode_position,
    estimate_storage,
    expected_file_size,
    pack_record,
    storage_table,
    unpack_record,
)
from selkd.classes import SparseTarget, sample_classes
from selkd.errors import CacheCapacityError, CacheCorruptionError


def random_target(rng, V, U):
    # a few classes with arbitrary positive counts summing to U
    n = int(rng.integers(1, min(U, 20) + 1))
    support = np.sort(rng.choice(V, size=n, replace=False))
    counts = 1 + rng.multinomial(U - n, np.full(n, 1 / n))
    return SparseTarget(support, counts, U)


class TestRecord:
    def test_bit_layout(self):
        # 64 * 2**17 + 5 = 8388613 = 0x800005
        assert pack_record(5, 64) == bytes([0x05, 0x00, 0x80])
        assert unpack_record(bytes([0x05, 0x00, 0x80])) == (5, 64)

    def test_sentinel(self):
        assert SENTINEL_BYTES == bytes([0xFF, 0xFF, 0x01])
        assert unpack_record(SENTINEL_BYTES) == (2**17 - 1, 0)

    def test_extremes(self):
        raw = pack_record(2**17 - 2, 127)
        assert unpack_record(raw) == (2**17 - 2, 127)

    @pytest.mark.parametrize("index,count", [(2**17 - 1, 1), (-1, 1), (0, 128), (0, 0)])
    def test_capacity(self, index, count):
        with pytest.raises(CacheCapacityError):
            pack_record(index, count)


class TestPosition:
    def test_single_class_block(self):
        block = encode_position(SparseTarget([5], [64], 64), 64)
        assert len(block) == 64 * 3
        assert block[:3] == bytes([0x05, 0x00, 0x80])
        assert block[3:] == SENTINEL_BYTES * 63

    def test_records_sorted(self):
        block = encode_position(SparseTarget([9, 2, 5], [1, 2, 1], 4), 4)
        assert [unpack_record(block[i:i + 3])[0] for i in range(0, 9, 3)] == [2, 5, 9]

    def test_decode_weights(self):
        block = pack_record(3, 48) + pack_record(10, 16) + SENTINEL_BYTES * 62
        t = decode_position(block, 64)
        np.testing.assert_array_equal(t.support, [3, 10])
        np.testing.assert_array_equal(t.weights, [0.75, 0.25])

    def test_all_sentinel(self):
        with pytest.raises(CacheCorruptionError):
            decode_position(SENTINEL_BYTES * 4, 4)

    def test_duplicate_index(self):
        with pytest.raises(CacheCorruptionError):
            decode_position(pack_record(3, 2) + pack_record(3, 2), 2)

    def test_count_mismatch(self):
        with pytest.raises(CacheCorruptionError):
            decode_position(pack_record(3, 1) + SENTINEL_BYTES, 2)

    def test_wrong_length(self):
        with pytest.raises(CacheCorruptionError):
            decode_position(b"\x00" * 5, 2)

    def test_encode_rejects_u_mismatch(self):
        with pytest.raises(ValueError):
            encode_position(SparseTarget([1], [4], 4), 8)

    def test_encode_rejects_large_index(self):
        with pytest.raises(CacheCapacityError):
            encode_position(SparseTarget([2**17 - 1], [2], 2), 2)

    def test_roundtrip_fuzz(self):
        rng = np.random.default_rng(0)
        V, U = 100_000, 64
        for _ in range(10_000):
            t = random_target(rng, V, U)
            block = encode_position(t, U)
            back = decode_position(block, U)
            assert back == t
            np.testing.assert_array_equal(back.weights, t.counts / U)
            assert encode_position(back, U) == block

    def test_roundtrip_sampled_targets(self):
        rng = np.random.default_rng(1)
        for U in (12, 64, 127):
            for _ in range(200):
                t = sample_classes(rng.dirichlet(np.full(50, 0.2)), U, rng)
                assert decode_position(encode_position(t, U), U) == t


class TestFile:
    def build(self, path, rng, V=300, U=12, lengths=(5, 9, 2, 17)):
        samples = {}
        with CacheWriter(path, V, U) as w:
            for sid, L in zip((4, 0, 11, 7), lengths):
                ts = [random_target(rng, V, U) for _ in range(L - 1)]
                w.add_sample(sid, ts)
                samples[sid] = ts
        return samples

    def test_header_layout(self, tmp_path):
        path = tmp_path / "c.skdc"
        self.build(path, np.random.default_rng(0))
        data = path.read_bytes()
        magic, version, flags, V, U, n = struct.unpack_from("<4sBBIHQ", data)
        assert (magic, version, flags, V, U, n) == (b"SKDC", 1, 0, 300, 12, 4)
        assert HEADER_BYTES == 20
        sid, count = struct.unpack_from("<QI", data, 20)
        assert (sid, count) == (4, 4)

    def test_size_closed_form(self, tmp_path):
        path = tmp_path / "c.skdc"
        lengths = (5, 9, 2, 17)
        self.build(path, np.random.default_rng(0), lengths=lengths)
        body = sum(L - 1 for L in lengths) * 12 * 3
        assert path.stat().st_size == HEADER_BYTES + 12 * len(lengths) + body
        assert path.stat().st_size == expected_file_size([L - 1 for L in lengths], 12)

    def test_read_back(self, tmp_path):
        path = tmp_path / "c.skdc"
        samples = self.build(path, np.random.default_rng(3))
        r = CacheReader(path)
        assert sorted(r.sample_ids) == sorted(samples)
        for sid, ts in samples.items():
            assert r.read_sample(sid) == ts
        assert r.read_sample(7, [3, 0]) == [samples[7][3], samples[7][0]]
        assert r.read_position(0, 7) == samples[0][7]
        s = r.summary()
        assert s["bytes"] == s["expected_bytes"]

    def test_truncated(self, tmp_path):
        path = tmp_path / "c.skdc"
        self.build(path, np.random.default_rng(0))
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(CacheCorruptionError):
            CacheReader(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.skdc"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(CacheCorruptionError):
            CacheReader(path)

    def test_writer_limits(self, tmp_path):
        with pytest.raises(CacheCapacityError):
            CacheWriter(tmp_path / "a", 2**17 + 1, 8)
        with pytest.raises(CacheCapacityError):
            CacheWriter(tmp_path / "b", 100, 128)

    def test_missing_sample(self, tmp_path):
        path = tmp_path / "c.skdc"
        self.build(path, np.random.default_rng(0))
        with pytest.raises(KeyError):
            CacheReader(path).read_sample(99)


class TestStorage:
    @pytest.mark.parametrize(
        "method,U,expected",
        [
            ("rs_kd", 64, 19.2),
            ("rs_kd", 12, 3.6),
            ("se_kd_3x", 64, 3.84),
            ("se_kd_3x", 12, 0.72),
            ("vanilla_ce", 64, 0.3),
            ("vanilla_ce", 12, 0.3),
        ],
    )
    def test_reference_cells(self, method, U, expected):
        assert estimate_storage(method, 100e9, 100_000, U, 0.2).total_terabytes == expected

    def test_bytes_per_position(self):
        assert estimate_storage("rs_kd", U=64).bytes_per_position == 192
        assert estimate_storage("se_kd_3x", U=64, l=0.2).bytes_per_position == 38.4
        assert estimate_storage("vanilla_ce").bytes_per_position == 3

    def test_full_kd_flagged(self):
        e = estimate_storage("full_kd", 100e9, 100_000, 64)
        assert e.bytes_per_position == 200_000
        assert e.total_terabytes == 20_000
        assert e.note and "10000" in e.note

    def test_full_kd_other_vocab_unflagged(self):
        assert estimate_storage("full_kd", 1e9, 1000, 64).note is None

    def test_unknown(self):
        with pytest.raises(ValueError):
            estimate_storage("dense", 1, 1, 1)

    def test_table_text(self):
        text = storage_table()
        assert "19.2" in text and "3.84" in text and "0.72" in text
