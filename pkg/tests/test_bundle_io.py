import struct
import zlib

import numpy as np
import pytest

from cafusion.data import (
    BadMagicError, ChecksumError, ConceptBundle, ConceptRecord, TruncatedPayloadError, VersionMismatchError,
    read_bundle_file, write_bundle_file,
)
from cafusion.data import bundle_io, rle


def _bundle(pid, iid, n_real, d_in=256, label=1, seed=0, grid=(32, 32)):
    rng = np.random.default_rng([seed, pid, iid])
    concepts = []
    for j in range(n_real):
        mask = np.zeros(grid, bool)
        mask[j:j + 3, 2 * j:2 * j + 4] = True
        concepts.append(ConceptRecord(rng.standard_normal(d_in).astype(np.float32),
                                      (2 * j, j, 2 * j + 4, j + 3), rle.encode(mask)))
    return ConceptBundle(pid, iid, label, rng.standard_normal(d_in).astype(np.float32), concepts, grid)


def _assert_same(a, b):
    assert (a.patient_id, a.image_id, a.label, a.grid) == (b.patient_id, b.image_id, b.label, b.grid)
    assert a.global_source.tobytes() == b.global_source.tobytes()
    assert len(a.concepts) == len(b.concepts)
    for x, y in zip(a.concepts, b.concepts):
        assert x.feature.tobytes() == y.feature.tobytes()
        assert tuple(x.bbox) == tuple(y.bbox)
        np.testing.assert_array_equal(x.mask_rle, y.mask_rle)


def test_round_trip_sixty_bundles(tmp_path):
    bundles = [_bundle(i // 2, i, i % 5, label=i % 3 - 1) for i in range(60)]
    path = write_bundle_file(bundles, tmp_path / "b.cafb")
    back = read_bundle_file(path)
    assert len(back) == 60
    for a, b in zip(bundles, back):
        _assert_same(a, b)
    assert bundle_io.encode_bundles(back) == path.read_bytes()


def test_payload_size_from_layout():
    b = _bundle(0, 0, 2)
    runs = sum(c.mask_rle.size for c in b.concepts)
    header = 4 + 5 * 4
    record = 4 * 4
    features = 3 * 256 * 4
    boxes_masks = 2 * (4 * 4 + 4) + 4 * runs
    crc = 4
    assert len(bundle_io.encode_bundles([b])) == header + record + features + boxes_masks + crc


def test_header_fields():
    data = bundle_io.encode_bundles([_bundle(3, 4, 1, d_in=16)])
    magic, version, count, d_in, h, w = struct.unpack_from("<4sIIIII", data)
    assert (magic, version, count, d_in, h, w) == (b"CAFB", 1, 1, 16, 32, 32)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def _corrupt(tmp_path, data):
    p = tmp_path / "bad.cafb"
    p.write_bytes(data)
    return p


def test_distinct_errors(tmp_path):
    good = bundle_io.encode_bundles([_bundle(0, 0, 2, d_in=8)])
    with pytest.raises(BadMagicError) as e1:
        read_bundle_file(_corrupt(tmp_path, b"XAFB" + good[4:]))
    with pytest.raises(VersionMismatchError) as e2:
        read_bundle_file(_corrupt(tmp_path, good[:4] + struct.pack("<I", 2) + good[8:]))
    with pytest.raises(TruncatedPayloadError) as e3:
        read_bundle_file(_corrupt(tmp_path, good[:-20]))
    flipped = bytearray(good)
    flipped[60] ^= 0xFF
    with pytest.raises(ChecksumError) as e4:
        read_bundle_file(_corrupt(tmp_path, bytes(flipped)))
    codes = {e.value.code for e in (e1, e2, e3, e4)}
    assert codes == {"BAD_MAGIC", "VERSION_MISMATCH", "TRUNCATED", "CHECKSUM"}


def test_mixed_dimensions_rejected():
    with pytest.raises(ValueError):
        bundle_io.encode_bundles([_bundle(0, 0, 1, d_in=8), _bundle(0, 1, 1, d_in=9)])
    with pytest.raises(ValueError):
        bundle_io.encode_bundles([_bundle(0, 0, 1, grid=(32, 32)), _bundle(0, 1, 1, grid=(16, 16))])


def test_raw_crop_sidecar_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    mask = np.zeros((16, 16), bool)
    mask[2:5, 2:5] = True
    c = ConceptRecord(rng.random((8, 8, 3), dtype=np.float32), (2, 2, 5, 5), rle.encode(mask))
    b = ConceptBundle(0, 7, 2, rng.random((16, 16, 3), dtype=np.float32), [c], (16, 16))
    path = write_bundle_file([b], tmp_path / "raw.cafb")
    assert struct.unpack_from("<I", path.read_bytes(), 12)[0] == 0
    back = read_bundle_file(path)[0]
    assert back.global_source.tobytes() == b.global_source.tobytes()
    assert back.concepts[0].feature.tobytes() == c.feature.tobytes()
