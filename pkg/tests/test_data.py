import logging
from pathlib import Path

import numpy as np
import pytest

from mrbcnn.data import (
    DatasetManifest,
    ImageSet,
    Record,
    decode_image,
    decode_ppm,
    decode_raw,
    encode_ppm,
    encode_raw,
    epoch_plan,
    load_manifest,
    make_epoch_batches,
    resize_bilinear,
    synth_dataset,
    write_manifest,
)
from mrbcnn.errors import ContractError, DecodeError, ManifestError
from mrbcnn.rng import Stream


def _write(tmp_path, text, name="m.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_manifest_three_lines(tmp_path):
    m = load_manifest(_write(tmp_path, "path,person_id,camera_id\na.ppm,1,0\nb.ppm,1,1\nc.ppm,2,0\n"))
    assert len(m) == 3
    assert m.person_ids.tolist() == [1, 1, 2]
    assert m.identities == [1, 2]
    assert m.resolve(m.records[0]) == tmp_path / "a.ppm"


def test_manifest_header_only_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        m = load_manifest(_write(tmp_path, "path,person_id,camera_id\n"))
    assert len(m) == 0
    assert "no records" in caplog.text


def test_manifest_bad_id_names_line(tmp_path):
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(_write(tmp_path, "path,person_id,camera_id\na.ppm,x,0\n"))


def test_manifest_other_errors(tmp_path):
    with pytest.raises(ManifestError, match="line 1"):
        load_manifest(_write(tmp_path, "file,id,cam\n"))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(_write(tmp_path, "path,person_id,camera_id\na.ppm,1,0\na.ppm,1,1\n"))
    with pytest.raises(ManifestError, match="negative"):
        load_manifest(_write(tmp_path, "path,person_id,camera_id\na.ppm,1,-1\n"))


def test_manifest_split_column_roundtrip(tmp_path):
    m = DatasetManifest([Record("a.ppm", 1, 0, "query"), Record("b.ppm", 1, 1, "gallery")], tmp_path)
    write_manifest(m, tmp_path / "out.csv")
    back = load_manifest(tmp_path / "out.csv")
    assert [r.split for r in back.records] == ["query", "gallery"]
    assert [r.path for r in back.records] == ["a.ppm", "b.ppm"]


def test_ppm_white_pixel():
    img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff")
    assert img.shape == (3, 1, 1)
    assert img.reshape(-1).tolist() == [1.0, 1.0, 1.0]


def test_ppm_known_bytes():
    body = bytes([0, 51, 102, 153, 204, 255, 255, 0, 0, 10, 20, 30])
    img = decode_ppm(b"P6\n# comment\n2 2\n255\n" + body)
    want = np.array(list(body), dtype=float).reshape(2, 2, 3).transpose(2, 0, 1) / 255
    np.testing.assert_array_equal(img, want)
    assert encode_ppm(img)[-12:] == body


def test_ppm_errors():
    with pytest.raises(DecodeError):
        decode_ppm(b"P3\n1 1\n255\n")
    with pytest.raises(DecodeError):
        decode_ppm(b"P6\n2 2\n255\n\x00\x00")
    with pytest.raises(DecodeError):
        decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")


def test_raw_roundtrip_bit_identical(gen, tmp_path):
    arr = gen.standard_normal((3, 5, 4))
    buf = encode_raw(arr)
    back = decode_raw(buf)
    assert back.tobytes() == arr.tobytes()
    (tmp_path / "x.raw").write_bytes(buf)
    np.testing.assert_array_equal(decode_image(tmp_path / "x.raw"), arr)
    with pytest.raises(DecodeError):
        decode_raw(buf[:-3])


def test_resize_identity_and_constant(gen):
    img = gen.uniform(0, 1, (3, 160, 60))
    assert resize_bilinear(img).tobytes() == img.tobytes()
    const = np.full((3, 37, 23), 0.4)
    np.testing.assert_allclose(resize_bilinear(const), 0.4, atol=1e-15)
    np.testing.assert_allclose(resize_bilinear(const, 13, 7), 0.4, atol=1e-15)


def test_resize_downscale_ramp():
    h, w = 40, 24
    rows = np.arange(h, dtype=float)[:, None] * 0.01 + np.arange(w)[None, :] * 0.02
    img = np.stack([rows] * 3)
    out = resize_bilinear(img, h // 2, w // 2)
    r = np.arange(h // 2)[:, None] * 2 + 0.5
    c = np.arange(w // 2)[None, :] * 2 + 0.5
    np.testing.assert_allclose(out[0], 0.01 * r + 0.02 * c, atol=1e-6)


def test_epoch_plan_deterministic_and_varies():
    ids = np.repeat(np.arange(40), 4)
    a = epoch_plan(ids, 32, Stream(3), 0)
    b = epoch_plan(ids, 32, Stream(3), 0)
    c = epoch_plan(ids, 32, Stream(3), 1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(np.concatenate(a), np.concatenate(c))
    assert sorted(np.concatenate(a).tolist()) == list(range(160))


def test_epoch_plan_256_records():
    ids = np.repeat(np.arange(64), 4)
    plan = epoch_plan(ids, 128, Stream(0), 0)
    assert [len(p) for p in plan] == [128, 128]


def test_epoch_plan_guard():
    ids = np.arange(10)
    with pytest.raises(ContractError):
        epoch_plan(ids, 4, Stream(0), 0)
    ids = np.repeat(np.arange(3), 2)
    for e in range(10):
        for chunk in epoch_plan(ids, 3, Stream(0), e):
            u = np.unique(ids[chunk]).size
            assert 1 < u < len(chunk) or len(chunk) > 3


@pytest.fixture(scope="module")
def small_synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return synth_dataset(Stream(5), 10, 6, 0.05, out), out


def test_synth_deterministic(small_synth, tmp_path):
    m, out = small_synth
    m2 = synth_dataset(Stream(5), 10, 6, 0.05, tmp_path)
    assert (out / "manifest.csv").read_bytes() == (tmp_path / "manifest.csv").read_bytes()
    for r in m.records:
        assert (out / r.path).read_bytes() == (tmp_path / r.path).read_bytes()
    assert len(m2) == 60


def test_synth_noiseless_identical(tmp_path):
    m = synth_dataset(Stream(9), 3, 4, 0.0, tmp_path, jitter=0)
    for pid in m.identities:
        blobs = {(tmp_path / r.path).read_bytes() for r in m.records if r.person_id == pid}
        assert len(blobs) == 1


def test_synth_within_closer_than_between(small_synth):
    m, _ = small_synth
    imgs = ImageSet.load(m, 160, 60).images.reshape(len(m), -1)
    ids = m.person_ids
    d = np.sqrt(((imgs[:, None] - imgs[None]) ** 2).sum(-1))
    iu = np.triu_indices(len(m), 1)
    same = ids[iu[0]] == ids[iu[1]]
    assert d[iu][same].mean() < d[iu][~same].mean()


def test_synth_cameras_round_robin(small_synth):
    m, _ = small_synth
    for pid in m.identities:
        cams = m.camera_ids[m.person_ids == pid]
        assert set(cams.tolist()) == {0, 1}


def test_imageset_batches(small_synth):
    m, _ = small_synth
    images = ImageSet.load(m, 80, 30)
    assert images.images.shape == (60, 3, 80, 30)
    assert images.images.min() >= 0 and images.images.max() <= 1
    batches = make_epoch_batches(images, 16, Stream(1), 0)
    assert sum(len(b) for b in batches) == 60
    b = batches[0]
    np.testing.assert_array_equal(b.images, images.images[b.indices])
    np.testing.assert_array_equal(b.person_ids, m.person_ids[b.indices])


def test_imageset_normalisation(small_synth):
    m, _ = small_synth
    raw = ImageSet.load(m.subset([0, 1]), 40, 20)
    norm = ImageSet.load(m.subset([0, 1]), 40, 20, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    np.testing.assert_allclose(norm.images, (raw.images - 0.5) / 0.25, atol=1e-15)


def test_manifest_written_elsewhere_still_resolves(small_synth, tmp_path, monkeypatch):
    m, out = small_synth
    monkeypatch.chdir(out.parent)
    rel_root = load_manifest(Path(out.name) / "manifest.csv")
    (tmp_path / "sub").mkdir()
    write_manifest(rel_root.subset([0, 5]), tmp_path / "sub" / "m.csv")
    back = load_manifest(tmp_path / "sub" / "m.csv")
    for a, b in zip(back.records, rel_root.subset([0, 5]).records):
        assert back.resolve(a).read_bytes() == rel_root.resolve(b).read_bytes()
    assert not Path(back.records[0].path).is_absolute()
