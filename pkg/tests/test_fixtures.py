import numpy as np
import pytest

from quadrank.fixtures import (
    TRANSFORM_CLASSES,
    load_pairs,
    make_class_pair,
    make_fixtures,
    make_texture,
    read_pair_manifest,
    write_pair_manifest,
)
from quadrank.imgio import load_image


def test_texture_range_and_determinism():
    a = make_texture(96, np.random.default_rng(0))
    b = make_texture(96, np.random.default_rng(0))
    assert np.array_equal(a, b)
    assert a.min() == pytest.approx(0.1, abs=1e-6)
    assert a.max() == pytest.approx(0.9, abs=1e-6)
    assert a.std() > 0.05  # actual texture, not a flat field


def test_default_fixture_suite_is_20_pairs(tmp_path):
    manifests = make_fixtures(tmp_path, seed=3, size=96)
    assert len(manifests) == 20  # 5 bases x 4 classes
    classes = {m.name.split("_", 1)[1].removesuffix(".pair") for m in manifests}
    assert classes == set(TRANSFORM_CLASSES)


def test_fixtures_regenerate_bit_identical(tmp_path):
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    make_fixtures(d1, seed=9, bases=1, size=96)
    make_fixtures(d2, seed=9, bases=1, size=96)
    files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()


def test_manifest_roundtrip_bit_exact(tmp_path):
    mapping = np.array(
        [[1.0000000000000002, -0.3333333333333333, 17.123456789012345],
         [0.3333333333333333, 1.0000000000000002, -4.987654321098765],
         [0.0, 0.0, 1.0]]
    )
    img = make_texture(96, np.random.default_rng(1))
    from quadrank.imgio import write_pgm

    write_pgm(tmp_path / "a.pgm", img)
    write_pgm(tmp_path / "b.pgm", img)
    manifest = tmp_path / "x.pair"
    write_pair_manifest(manifest, "a.pgm", "b.pgm", "viewpoint", mapping)
    pair = read_pair_manifest(manifest)
    assert np.array_equal(pair.mapping, mapping)
    assert pair.transform_class == "viewpoint"
    assert pair.name == "x"


def test_load_pairs_sorted_and_images_loaded(tmp_path):
    make_fixtures(tmp_path, seed=2, bases=2, size=96)
    pairs = load_pairs(tmp_path)
    assert len(pairs) == 8
    names = [p.name for p in pairs]
    assert names == sorted(names)
    for p in pairs:
        assert p.image_a.shape == (96, 96)
        assert p.image_b.shape == (96, 96)


def test_load_pairs_empty_dir_rejected(tmp_path):
    with pytest.raises(ValueError, match="manifests"):
        load_pairs(tmp_path)


def test_identity_classes_have_identity_mapping(tmp_path):
    img = make_texture(96, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    for cls in ("illumination", "blur"):
        pair = make_class_pair(img, cls, rng)
        assert np.array_equal(pair.mapping, np.eye(3))
        assert not np.array_equal(pair.image_a, pair.image_b)


def test_geometric_classes_have_unit_determinant_or_zoom(tmp_path):
    img = make_texture(96, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    vp = make_class_pair(img, "viewpoint", rng)
    assert np.linalg.det(vp.mapping[:2, :2]) == pytest.approx(1.0, abs=1e-9)
    zr = make_class_pair(img, "zoom-rotation", rng)
    zoom_sq = np.linalg.det(zr.mapping[:2, :2])
    assert 0.8**2 - 1e-9 <= zoom_sq <= 1.25**2 + 1e-9


def test_manifest_images_resolve_relative_to_manifest(tmp_path):
    sub = tmp_path / "nested"
    make_fixtures(sub, seed=8, bases=1, size=96)
    pairs = load_pairs(tmp_path)  # scan from the parent
    assert pairs and pairs[0].image_a.shape == (96, 96)


def test_warped_image_written_matches_loaded(tmp_path):
    manifests = make_fixtures(tmp_path, seed=10, bases=1, size=96)
    pair = read_pair_manifest(manifests[0])
    direct = load_image(tmp_path / "base00.pgm")
    assert np.array_equal(pair.image_a, direct)
