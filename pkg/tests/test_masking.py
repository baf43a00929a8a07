import hashlib
import json
import os

import numpy as np
import pytest
from PIL import Image

from conftest import write_png
from facechannel.dataset import DatasetManifest, Sample, parse_manifest
from facechannel.errors import DegenerateGeometryError, InsufficientCorrespondenceError
from facechannel.masking import (
    AffineTransform,
    MaskTemplate,
    composite,
    estimate_affine,
    generate_masked_dataset,
    overlay_mask,
    warp_template,
)
from facechannel.synthetic import default_mask_template

ANCHORS = {"mouth_left": (2.0, 3.0), "mouth_right": (9.0, 3.0), "chin": (5.5, 9.0), "nose_bridge": (5.5, 0.0)}


def affine_from(m, pts):
    return {k: tuple(np.array(m)[:, :2] @ np.array(v) + np.array(m)[:, 2]) for k, v in pts.items()}


def test_identity_fit():
    t = estimate_affine(ANCHORS, ANCHORS)
    assert np.allclose(t.linear, np.eye(2), atol=1e-9)
    assert np.allclose(t.translation, 0, atol=1e-9)


def test_uniform_scale_fit():
    t = estimate_affine(ANCHORS, {k: (2 * x, 2 * y) for k, (x, y) in ANCHORS.items()})
    assert np.allclose(t.linear, 2 * np.eye(2), atol=1e-12)
    assert np.allclose(t.translation, 0, atol=1e-12)


def test_noisy_fit_matches_normal_equations():
    rng = np.random.default_rng(0)
    target = affine_from([[1.1, 0.2, 3.0], [-0.1, 0.9, -2.0]], ANCHORS)
    noisy = {k: (x + rng.normal(0, 0.3), y + rng.normal(0, 0.3)) for k, (x, y) in target.items()}
    names = list(ANCHORS)
    A = np.array([[*ANCHORS[n], 1.0] for n in names])
    B = np.array([noisy[n] for n in names])
    oracle = np.linalg.solve(A.T @ A, A.T @ B).T
    assert np.max(np.abs(estimate_affine(ANCHORS, noisy).matrix - oracle)) < 1e-8


def test_three_pairs_fit_exactly():
    three = {k: ANCHORS[k] for k in ("mouth_left", "mouth_right", "chin")}
    m = np.array([[0.5, -1.2, 4.0], [0.7, 0.3, 1.0]])
    assert np.allclose(estimate_affine(three, affine_from(m, three)).matrix, m, atol=1e-10)


def test_fit_errors():
    two = {k: ANCHORS[k] for k in ("mouth_left", "mouth_right")}
    with pytest.raises(InsufficientCorrespondenceError):
        estimate_affine(two, two)
    with pytest.raises(InsufficientCorrespondenceError):
        estimate_affine(ANCHORS, {"mouth_left": (1, 1), "eye": (2, 2), "chin": (3, 3)})
    line = {"a": (0, 0), "b": (1, 1), "c": (2, 2), "d": (5, 5)}
    with pytest.raises(DegenerateGeometryError):
        estimate_affine(line, line)
    with pytest.raises(DegenerateGeometryError):
        AffineTransform(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]))


def test_anchors_reproject_onto_keypoints():
    rng = np.random.default_rng(4)
    m = np.array([[0.8, 0.3, 12.0], [-0.2, 1.1, 20.0]])
    kps = affine_from(m, ANCHORS)
    t = estimate_affine(ANCHORS, kps)
    for name, p in ANCHORS.items():
        assert np.linalg.norm(t.apply(p)[0] - kps[name]) < 0.5


def _template(alpha=1.0, color=(1.0, 0.0, 0.0)):
    rgba = np.zeros((10, 12, 4))
    rgba[..., :3] = color
    rgba[..., 3] = alpha
    return rgba


def test_zero_alpha_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (30, 30, 3), dtype=np.uint8)
    out = composite(img, _template(alpha=0.0), ANCHORS, affine_from([[1, 0, 5], [0, 1, 6]], ANCHORS))
    assert out.dtype == img.dtype and np.array_equal(out, img)


def test_template_rejects_empty_alpha():
    with pytest.raises(ValueError):
        MaskTemplate(_template(alpha=0.0), ANCHORS)
    with pytest.raises(ValueError):
        MaskTemplate(_template(), {k: v for k, v in ANCHORS.items() if k != "chin"})
    with pytest.raises(ValueError):
        MaskTemplate(_template(), {**ANCHORS, "chin": (50.0, 5.0)})


def test_full_opacity_copies_template_pixels():
    template = MaskTemplate(_template(color=(0.2, 0.4, 0.6)), ANCHORS)
    img = np.zeros((20, 20, 3))
    shift = {k: (x + 4, y + 5) for k, (x, y) in ANCHORS.items()}
    out = overlay_mask(img, shift, template)
    # template pixel (c, r) lands on (c + 4, r + 5); the interior is fully covered
    region = out[5:15, 4:16]
    assert np.allclose(region, [0.2, 0.4, 0.6], atol=1e-12)
    assert np.array_equal(out[:5], img[:5]) and np.array_equal(out[:, :4], img[:, :4])


def test_locality_random_transforms():
    rng = np.random.default_rng(1)
    tpl = _template(alpha=0.7)
    tpl[:3, :, 3] = 0
    for _ in range(20):
        m = np.array([[rng.uniform(0.5, 2), rng.uniform(-0.5, 0.5), rng.uniform(0, 20)],
                      [rng.uniform(-0.5, 0.5), rng.uniform(0.5, 2), rng.uniform(0, 20)]])
        img = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
        out = composite(img, tpl, ANCHORS, affine_from(m, ANCHORS))
        _, alpha = warp_template(tpl, estimate_affine(ANCHORS, affine_from(m, ANCHORS)), 40, 40)
        outside = alpha == 0
        assert outside.any() and (~outside).any()
        assert np.array_equal(out[outside], img[outside])


def test_grayscale_and_float_images():
    template = MaskTemplate(_template(color=(1.0, 0.0, 0.0)), ANCHORS)
    gray = np.full((20, 20), 0.5)
    out = overlay_mask(gray, ANCHORS, template)
    assert out.shape == gray.shape
    assert out[4, 4] == pytest.approx(0.299)


def test_default_template_is_valid(tmp_path):
    t = default_mask_template()
    t.save(tmp_path / "m.png", tmp_path / "m.json")
    again = MaskTemplate.load(tmp_path / "m.png", tmp_path / "m.json")
    assert again.anchors == t.anchors
    assert np.allclose(again.rgba, t.rgba, atol=1 / 255)


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_generate_three_samples(faces, tmp_path):
    src = DatasetManifest(faces.samples[:3])
    out, report = generate_masked_dataset(src, default_mask_template(), tmp_path / "m")
    assert report.processed == 3 and report.skipped == 0
    assert len(out) == 3
    assert [(s.arousal, s.valence) for s in out] == [(s.arousal, s.valence) for s in src]
    assert all(s.image_path.exists() for s in out)
    reparsed = parse_manifest(tmp_path / "m" / "manifest.csv")
    assert [(s.arousal, s.valence) for s in reparsed] == [(s.arousal, s.valence) for s in src]
    assert json.loads((tmp_path / "m" / "report.json").read_text()) == {
        "processed": 3, "skipped": 0, "skipped_paths": []
    }


def test_generate_skips_missing_keypoints(faces, tmp_path):
    bare = Sample(faces[1].image_path, faces[1].arousal, faces[1].valence, None)
    src = DatasetManifest((faces[0], bare, faces[2]))
    out, report = generate_masked_dataset(src, default_mask_template(), tmp_path / "m")
    assert len(out) == 2 and report.skipped == 1
    assert report.skipped_paths == [str(bare.image_path)]


def test_generate_with_sidecar(faces, tmp_path):
    bare = [Sample(s.image_path, s.arousal, s.valence, None) for s in faces.samples[:2]]
    sidecar = tmp_path / "kp.json"
    sidecar.write_text(json.dumps(
        [{"image": str(s.image_path), "points": {k: list(v) for k, v in s.keypoints.items()}} for s in faces.samples[:2]]
    ))
    out, report = generate_masked_dataset(DatasetManifest(bare), default_mask_template(), tmp_path / "m", sidecar)
    assert report.processed == 2


def test_generation_is_deterministic_and_order_stable(faces, tmp_path):
    t = default_mask_template()
    a, _ = generate_masked_dataset(faces, t, tmp_path / "a")
    b, _ = generate_masked_dataset(faces, t, tmp_path / "b", jobs=4)
    assert [s.image_path.name for s in a] == [s.image_path.name for s in b]
    assert [_digest(s.image_path) for s in a] == [_digest(s.image_path) for s in b]
    # the mask actually changed the lower face
    before = np.asarray(Image.open(faces[0].image_path))
    after = np.asarray(Image.open(a[0].image_path))
    assert not np.array_equal(before, after)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_output(faces, tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    with pytest.raises(PermissionError):
        generate_masked_dataset(faces, default_mask_template(), locked)


def test_output_path_is_a_file(faces, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_masked_dataset(faces, default_mask_template(), blocker)
    assert not list(tmp_path.glob("*.png"))
