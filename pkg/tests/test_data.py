import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from swinifs.data import (
    AnnotationError,
    CropError,
    DegradationSpec,
    ImageRecord,
    LandmarkSet,
    ManifestEntry,
    bicubic_resample,
    crop_face,
    degrade,
    read_manifest,
    write_manifest,
)


def write(tmp_path, text, name="lm.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestAnnotations:
    def test_direct_field_mapping(self, tmp_path):
        rows = load(tmp_path, "a.jpg 10 20 30 20 20 30 12 40 28 40\n")
        assert rows[0][0] == "a.jpg"
        lms = rows[0][1]
        assert lms.left_eye == (10, 20)
        assert lms.right_eye == (30, 20)
        assert lms.nose == (20, 30)
        assert lms.mouth_left == (12, 40)
        assert lms.mouth_right == (28, 40)

    def test_empty_file(self, tmp_path):
        assert load(tmp_path, "") == []

    def test_nine_numbers_is_an_error_naming_the_line(self, tmp_path):
        text = "a.jpg 1 2 3 4 5 6 7 8 9 10\nb.jpg 1 2 3 4 5 6 7 8 9\n"
        with pytest.raises(AnnotationError, match=":2:"):
            load(tmp_path, text)

    def test_duplicate_id_rejected(self, tmp_path):
        text = "a.jpg 1 2 3 4 5 6 7 8 9 10\na.jpg 1 2 3 4 5 6 7 8 9 10\n"
        with pytest.raises(AnnotationError, match="duplicate"):
            load(tmp_path, text)

    def test_celeba_header_and_commas(self, tmp_path):
        text = (
            "2\n"
            "lefteye_x lefteye_y righteye_x righteye_y nose_x nose_y "
            "leftmouth_x leftmouth_y rightmouth_x rightmouth_y\n"
            "000001.jpg 69 109 106 113 77 142 73 152 108 154\n"
            "000002.jpg,69,110,107,112,81,135,70,151,108,153\n"
        )
        rows = load(tmp_path, text)
        assert [r[0] for r in rows] == ["000001.jpg", "000002.jpg"]
        assert rows[1][1].nose == (81, 135)


def load(tmp_path, text):
    from swinifs.data import load_landmark_annotations

    return load_landmark_annotations(write(tmp_path, text))


# ---------------------------------------------------------------------------
# bicubic


def catmull_rom(t):
    t = abs(t)
    if t <= 1:
        return 1.5 * t**3 - 2.5 * t**2 + 1
    if t < 2:
        return -0.5 * t**3 + 2.5 * t**2 - 4 * t + 2
    return 0.0


def dense_resample_1d(row, out_len):
    """Evaluate every output site as an explicit normalized kernel sum."""
    n = len(row)
    scale = n / out_len
    stretch = max(scale, 1.0)
    out = []
    for j in range(out_len):
        center = (j + 0.5) * scale
        num = den = 0.0
        for k in range(-3 * n, 4 * n):
            w = catmull_rom((k + 0.5 - center) / stretch)
            num += w * row[min(max(k, 0), n - 1)]
            den += w
        out.append(num / den)
    return out


class TestBicubic:
    def test_constant_is_preserved(self):
        img = torch.full((3, 37, 23), 0.7, dtype=torch.float64)
        for size in [(5, 9), (74, 46), (37, 23), (1, 1)]:
            out = bicubic_resample(img, *size)
            assert torch.allclose(out, torch.full_like(out, 0.7), atol=1e-12)

    def test_paper_sizes(self):
        img = torch.rand(3, 128, 128)
        assert bicubic_resample(img, 32, 32).shape == (3, 32, 32)
        assert bicubic_resample(img, 16, 16).shape == (3, 16, 16)

    def test_ramp_upscale_matches_dense_kernel_sum(self):
        row = [0.1 * i for i in range(8)]
        img = torch.tensor(row, dtype=torch.float64).view(1, 1, 8)
        out = bicubic_resample(img, 1, 16, clamp=False)[0, 0].tolist()
        expected = dense_resample_1d(row, 16)
        assert out == pytest.approx(expected, abs=1e-12)

    def test_downscale_matches_dense_kernel_sum(self):
        rng = np.random.default_rng(3)
        row = rng.random(20).tolist()
        img = torch.tensor(row, dtype=torch.float64).view(1, 1, 20)
        out = bicubic_resample(img, 1, 5, clamp=False)[0, 0].tolist()
        assert out == pytest.approx(dense_resample_1d(row, 5), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
    def test_same_size_is_identity(self, h, w, seed):
        img = torch.rand(3, h, w, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        assert (bicubic_resample(img, h, w) - img).abs().max() <= 1e-6

    def test_output_clamped(self):
        img = torch.zeros(1, 8, 8)
        img[:, 3:5, 3:5] = 1.0
        out = bicubic_resample(img, 32, 32)
        assert out.min() >= 0 and out.max() <= 1
        raw = bicubic_resample(img, 32, 32, clamp=False)
        assert raw.min() < 0  # ringing exists before the clamp

    def test_rejects_bad_size(self):
        with pytest.raises(ValueError):
            bicubic_resample(torch.rand(1, 4, 4), 0, 4)


# ---------------------------------------------------------------------------
# crop


def blob_image(h, w, points, sigma=1.2):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    img = np.zeros((3, h, w))
    for c, (x, y) in enumerate(points[:3]):
        img[c] = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    return torch.from_numpy(img)


def centroid(channel):
    h, w = channel.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    m = channel.numpy()
    return (xx * m).sum() / m.sum(), (yy * m).sum() / m.sum()


BOX_LMS = LandmarkSet.from_flat([40, 50, 60, 50, 50, 70, 42, 90, 58, 89])


class TestCrop:
    def test_output_size_and_landmarks_inside(self):
        src = torch.rand(3, 218, 178)
        rec = crop_face(src, BOX_LMS, 0.5)
        assert rec.hr_image.shape == (3, 128, 128)
        pts = rec.landmarks_hr.as_array()
        assert (pts >= 0).all() and (pts < 128).all()

    def test_zero_margin_is_tight_box(self):
        src = torch.rand(3, 218, 178, dtype=torch.float64)
        rec = crop_face(src, BOX_LMS, 0.0)
        tight = src[:, 50:91, 40:61]
        assert torch.allclose(rec.hr_image, bicubic_resample(tight, 128, 128))

    def test_remap_is_an_affine_composition(self):
        rec = crop_face(torch.rand(3, 218, 178), BOX_LMS, 0.25)
        # box [40,60]x[50,90], margins 5 and 10 px -> pixel crop x in [35, 66), y in [40, 101)
        to_origin = np.array([[1, 0, -35], [0, 1, -40], [0, 0, 1.0]])
        to_frame = np.diag([128 / 31, 128 / 61, 1.0])
        homog = np.c_[BOX_LMS.as_array(), np.ones(5)].T
        expected = (to_frame @ to_origin @ homog)[:2].T
        np.testing.assert_allclose(rec.landmarks_hr.as_array(), expected, rtol=1e-12)

    def test_remap_tracks_image_content(self):
        # a blob drawn at the landmark must land where the remapped landmark says
        lms = LandmarkSet.from_flat([60, 70, 100, 72, 80, 95, 66, 120, 98, 118])
        src = blob_image(218, 178, lms.points())
        rec = crop_face(src, lms, 0.5)
        for c in range(3):
            cx, cy = centroid(rec.hr_image[c])
            px, py = rec.landmarks_hr.points()[c]
            assert abs(cx - px) < 0.3 and abs(cy - py) < 0.3

    def test_clamped_to_source(self):
        lms = LandmarkSet.from_flat([2, 3, 170, 3, 90, 100, 5, 210, 170, 215])
        rec = crop_face(torch.rand(3, 218, 178), lms, 0.5)
        pts = rec.landmarks_hr.as_array()
        assert (pts >= 0).all() and (pts < 128).all()

    def test_degenerate_box(self):
        lms = LandmarkSet.from_flat([40, 50, 60, 50, 50, 50, 42, 50, 58, 50])
        with pytest.raises(CropError):
            crop_face(torch.rand(3, 218, 178), lms, 0.5)

    def test_landmark_outside_source(self):
        lms = LandmarkSet.from_flat([40, 50, 60, 50, 50, 70, 42, 90, 258, 89])
        with pytest.raises(CropError):
            crop_face(torch.rand(3, 218, 178), lms, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.tuples(st.floats(0, 177.99), st.floats(0, 217.99)), min_size=5, max_size=5),
        st.floats(0, 1.5),
    )
    def test_landmarks_always_inside_frame(self, pts, margin):
        xs, ys = zip(*pts)
        if max(xs) - min(xs) < 1e-3 or max(ys) - min(ys) < 1e-3:
            return
        lms = LandmarkSet.from_flat([c for p in pts for c in p])
        rec = crop_face(torch.zeros(3, 218, 178), lms, margin)
        arr = rec.landmarks_hr.as_array()
        assert (arr >= 0).all() and (arr < 128).all()


# ---------------------------------------------------------------------------
# degradation


def gray_record(value=0.5):
    lms = LandmarkSet.from_flat([40, 50, 80, 50, 60, 70, 45, 90, 75, 90])
    return ImageRecord("gray", torch.full((3, 128, 128), value), lms)


class TestDegrade:
    def test_pure_bicubic_setting(self, records):
        rec = records[0]
        lr, lms = degrade(rec, DegradationSpec(scale=4))
        assert lr.shape == (3, 32, 32)
        assert torch.equal(lr, bicubic_resample(rec.hr_image, 32, 32))
        np.testing.assert_allclose(lms.as_array(), rec.landmarks_hr.as_array() / 4)

    def test_identity_kernel(self, records):
        delta = np.zeros((5, 5))
        delta[2, 2] = 1.0
        lr, _ = degrade(records[1], DegradationSpec(scale=8, blur_kernel=delta))
        assert torch.allclose(lr, bicubic_resample(records[1].hr_image, 16, 16), atol=1e-7)

    def test_noise_mean_absolute_deviation(self):
        rec = gray_record()
        sigma = 0.05
        clean, _ = degrade(rec, DegradationSpec(4))
        noisy, _ = degrade(rec, DegradationSpec(4, noise_sigma=sigma), rng_seed=123)
        mad = float((noisy - clean).abs().mean())
        assert mad == pytest.approx(sigma * math.sqrt(2 / math.pi), rel=0.05)

    def test_noise_reproducible_per_seed(self):
        rec = gray_record()
        spec = DegradationSpec(4, noise_sigma=0.05)
        a, _ = degrade(rec, spec, 7)
        b, _ = degrade(rec, spec, 7)
        c, _ = degrade(rec, spec, 8)
        assert torch.equal(a, b) and not torch.equal(a, c)

    def test_noiseless_is_byte_identical(self, records):
        a, _ = degrade(records[2], DegradationSpec(4), 1)
        b, _ = degrade(records[2], DegradationSpec(4), 2)
        assert a.numpy().tobytes() == b.numpy().tobytes()

    @pytest.mark.parametrize("kernel", [None, np.full((3, 3), 1 / 9), np.outer([1, 4, 6, 4, 1], [1, 4, 6, 4, 1]) / 256])
    def test_constant_input_stays_constant(self, kernel):
        lr, _ = degrade(gray_record(0.3), DegradationSpec(8, blur_kernel=kernel))
        assert torch.allclose(lr, torch.full_like(lr, 0.3), atol=1e-6)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DegradationSpec(scale=3)
        with pytest.raises(ValueError):
            DegradationSpec(blur_kernel=np.ones((3, 3)))
        with pytest.raises(ValueError):
            DegradationSpec(noise_sigma=-0.1)


def test_manifest_roundtrip(tmp_path):
    lms = LandmarkSet.from_flat([1.25, 2, 3, 4, 5, 6, 7, 8, 9, 10.5])
    entries = [ManifestEntry(tmp_path / "hr" / "a.png", tmp_path / "lr" / "a.png", lms, 4)]
    write_manifest(entries, tmp_path / "m.txt")
    line = (tmp_path / "m.txt").read_text().split()
    assert line[0] == "hr/a.png" and len(line) == 13
    back = read_manifest(tmp_path / "m.txt")
    assert back[0].landmarks_lr == lms and back[0].scale == 4
    assert back[0].hr_path.resolve() == (tmp_path / "hr" / "a.png").resolve()
