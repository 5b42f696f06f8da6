import numpy as np
import pytest

from fixedprint import Gallery, GalleryRecord, compress, Template
from fixedprint.errors import ConflictError, FormatError, InvalidInputError, VersionError
from fixedprint.gallery import enroll, load, save
from fixedprint.minutiae import MinutiaeSet
from fixedprint.template import compress_rows, CompressedTemplate, decompress_rows

from conftest import unit


def records(rng, n, with_minutiae=True):
    rows = unit(rng, n)
    codes, lo, hi = compress_rows(rows)
    out = []
    for i in range(n):
        m = None
        if with_minutiae and i % 3:
            k = int(rng.integers(0, 12))
            m = MinutiaeSet(np.column_stack([rng.uniform(0, 448, k), rng.uniform(0, 448, k),
                                             rng.uniform(0, 6.28, k)]), 448, 448)
        out.append(GalleryRecord(f"subj-{i // 10}", i % 10,
                                 CompressedTemplate(codes[i], lo[i], hi[i]), m))
    return out


def test_enroll_and_lookup(rng):
    g = enroll(Gallery(), records(rng, 1)[0])
    assert len(g) == 1
    recs = records(rng, 25)
    g = Gallery(recs)
    assert [r.key for r in g] == [r.key for r in recs]
    assert g.ordinal(("subj-1", 3)) == 13
    assert ("subj-1", 3) in g and ("nobody", 0) not in g
    assert g.get(("subj-2", 0)) is recs[20]


def test_duplicate_key_conflict(rng):
    r = records(rng, 1)[0]
    g = Gallery([r])
    with pytest.raises(ConflictError):
        g.enroll(r)
    assert len(g) == 1


def test_record_validation(rng):
    c = compress(Template(unit(rng, 1)[0]))
    with pytest.raises(InvalidInputError):
        GalleryRecord("", 0, c)
    with pytest.raises(InvalidInputError):
        GalleryRecord("a", 10, c)


def test_empty_round_trip(tmp_path):
    path = tmp_path / "g.dpg"
    save(Gallery(), path)
    assert load(path) == Gallery()
    assert len(load(path)) == 0


def test_round_trip_mixed(tmp_path, rng):
    g = Gallery(records(rng, 60))
    path = tmp_path / "g.dpg"
    g.save(path)
    back = Gallery.load(path)
    assert back == g
    assert back.to_bytes() == g.to_bytes() == path.read_bytes()
    assert back[1].minutiae == g[1].minutiae and back[0].minutiae is None
    assert not (tmp_path / "g.dpg.tmp").exists()


def test_large_round_trip(rng):
    n = 100_000
    rows = unit(rng, n)
    codes, lo, hi = compress_rows(rows)
    g = Gallery(GalleryRecord(f"s{i}", 0, CompressedTemplate(codes[i], lo[i], hi[i]))
                for i in range(n))
    back = Gallery.from_bytes(g.to_bytes())
    assert len(back) == n
    assert np.array_equal(back.matrix(), decompress_rows(codes, lo, hi))


def test_header_layout(rng):
    blob = Gallery(records(rng, 3)).to_bytes()
    assert blob[:4] == b"DPGL"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:14], "little") == 3


def test_truncated_file_rejected(rng):
    blob = Gallery(records(rng, 10)).to_bytes()
    for cut in (3, 13, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError) as exc:
            Gallery.from_bytes(blob[:cut])
        assert exc.value.offset <= cut


def test_bad_magic_version_trailing(rng):
    blob = Gallery(records(rng, 2)).to_bytes()
    with pytest.raises(FormatError) as exc:
        Gallery.from_bytes(b"XXXX" + blob[4:])
    assert exc.value.offset == 0
    with pytest.raises(VersionError):
        Gallery.from_bytes(blob[:4] + (2).to_bytes(2, "little") + blob[6:])
    with pytest.raises(FormatError):
        Gallery.from_bytes(blob + b"\x00")


def test_matrix_cache_invalidated(rng):
    recs = records(rng, 4)
    g = Gallery(recs[:3])
    assert g.matrix().shape == (3, 192)
    g.enroll(recs[3])
    assert g.matrix().shape == (4, 192)
    assert not g.matrix().flags.writeable
