import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consisaug.boxgeom import FLIP_KINDS, FlipKind, flip_box, flip_image
from consisaug.data import (
    DOMAINS, LabeledSample, dataset_fingerprint, flip_sample, generate_synthetic, initial_augment,
    load_dataset, make_pair, read_labels, read_ppm, render_sample, scale_jitter, write_labels, write_ppm,
)
from consisaug.errors import CorruptImage, IoError, LabelParseError, MissingLabel

# recorded on the first run of generate_synthetic(DOMAINS["a"], 1, seed=0)
IMAGE0_SHA256 = "3497ff618d0f92e0363feb381fc93815a4d7546378d8e3b1d17c1eeeb3a79e9c"

NOOP_SEED = 4  # all three augmentation gates closed
ALL_GATES_SEED = 20  # all three open


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    generate_synthetic(DOMAINS["a"], 40, 3, out)
    return out


def toy_sample(rng=None):
    rng = rng or np.random.default_rng(0)
    return LabeledSample(rng.random((3, 32, 32)), np.array([[10.0, 12.0, 8.0, 6.0], [22.0, 20.0, 10.0, 12.0]]),
                         np.array([0, 0]), "toy")


class TestGenerate:
    def test_recorded_hash(self, tmp_path):
        entries = generate_synthetic(DOMAINS["a"], 1, 0, tmp_path)
        assert entries[0] == (IMAGE0_SHA256, "images/00000.ppm")
        manifest = (tmp_path / "manifest.txt").read_text().splitlines()
        assert manifest[0] == f"{IMAGE0_SHA256}  images/00000.ppm"
        assert hashlib.sha256((tmp_path / "images/00000.ppm").read_bytes()).hexdigest() == IMAGE0_SHA256

    def test_regeneration_is_bit_identical(self, tmp_path):
        a = generate_synthetic(DOMAINS["b"], 5, 9, tmp_path / "x")
        b = generate_synthetic(DOMAINS["b"], 5, 9, tmp_path / "y")
        assert a == b
        assert dataset_fingerprint(tmp_path / "x") == dataset_fingerprint(tmp_path / "y")

    def test_zero_polyps_gives_empty_label(self, tmp_path):
        cfg = dataclasses.replace(DOMAINS["a"], polyp_count_range=(0, 0))
        generate_synthetic(cfg, 2, 1, tmp_path)
        for i in range(2):
            assert (tmp_path / "labels" / f"{i:05d}.txt").read_text() == ""

    def test_boxes_in_bounds_and_large_enough(self):
        for name, cfg in DOMAINS.items():
            s = cfg.image_size
            for idx in range(200):
                _, boxes = render_sample(cfg, np.random.default_rng([7, idx]))
                if len(boxes):
                    assert np.all(boxes[:, 2:] >= 6.0)
                    assert np.all(boxes[:, :2] - boxes[:, 2:] / 2 >= 0)
                    assert np.all(boxes[:, :2] + boxes[:, 2:] / 2 <= s)

    def test_domains_differ(self):
        a, _ = render_sample(DOMAINS["a"], np.random.default_rng(0))
        b, _ = render_sample(DOMAINS["b"], np.random.default_rng(0))
        assert np.abs(a.mean(axis=(1, 2)) - b.mean(axis=(1, 2))).max() > 0.02

    def test_invalid_domain(self):
        with pytest.raises(ValueError):
            dataclasses.replace(DOMAINS["a"], radius_range=(2.0, 5.0))
        with pytest.raises(ValueError):
            dataclasses.replace(DOMAINS["a"], polyp_count_range=(3, 1))

    def test_n_must_be_positive(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic(DOMAINS["a"], 0, 0, tmp_path)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoError):
            generate_synthetic(DOMAINS["a"], 1, 0, blocker / "sub")


class TestLoad:
    def test_empty_directory(self, tmp_path):
        assert load_dataset(tmp_path) == []

    def test_round_trip(self, small_set):
        samples = load_dataset(small_set)
        assert [s.id for s in samples] == sorted(s.id for s in samples)
        assert len(samples) == 40
        cfg = DOMAINS["a"]
        for idx, s in enumerate(samples):
            img, boxes = render_sample(cfg, np.random.default_rng(np.random.SeedSequence([3, idx])))
            assert np.abs(s.image - img).max() <= 1 / 255 + 1e-12
            assert s.boxes.shape == boxes.shape
            if len(boxes):
                assert np.abs(s.boxes - boxes).max() < 0.5

    def test_missing_label(self, tmp_path):
        generate_synthetic(DOMAINS["a"], 2, 0, tmp_path)
        (tmp_path / "labels" / "00001.txt").unlink()
        with pytest.raises(MissingLabel):
            load_dataset(tmp_path)

    def test_corrupt_image(self, tmp_path):
        generate_synthetic(DOMAINS["a"], 2, 0, tmp_path)
        path = tmp_path / "images" / "00000.ppm"
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CorruptImage):
            load_dataset(tmp_path)

    @pytest.mark.parametrize("line", ["0 0.5 0.5 0.0 0.2", "0 0.5 0.5 -0.1 0.2", "0 0.5 0.5 0.2", "x 0.5 0.5 0.1 0.1"])
    def test_bad_label_line_names_file(self, tmp_path, line):
        path = tmp_path / "bad.txt"
        path.write_text("0 0.5 0.5 0.1 0.1\n" + line + "\n")
        with pytest.raises(LabelParseError, match="bad.txt:2"):
            read_labels(path, (64, 64))

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((3, 5, 7))
        write_ppm(tmp_path / "a.ppm", img)
        back = read_ppm(tmp_path / "a.ppm")
        assert back.shape == (3, 5, 7)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_ppm_rejects_other_formats(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(CorruptImage):
            read_ppm(tmp_path / "a.ppm")

    def test_label_round_trip(self, tmp_path):
        boxes = np.array([[10.25, 20.5, 6.0, 7.75]])
        write_labels(tmp_path / "l.txt", boxes, [0], 64)
        back, cls = read_labels(tmp_path / "l.txt", (64, 64))
        np.testing.assert_allclose(back, boxes, atol=1e-6)
        assert cls.tolist() == [0]


class TestAugment:
    def test_noop_seed(self):
        s = toy_sample()
        out = initial_augment(s, NOOP_SEED, enable_flip=True)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.boxes, s.boxes)

    def test_all_gates_change_image(self):
        s = toy_sample()
        assert not np.array_equal(initial_augment(s, ALL_GATES_SEED, True).image, s.image)

    def test_deterministic(self):
        s = toy_sample()
        a, b = initial_augment(s, [1, 2, 3], True), initial_augment(s, [1, 2, 3], True)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.boxes.tobytes() == b.boxes.tobytes()

    def test_unit_scale_is_identity(self):
        s = toy_sample()
        out = scale_jitter(s, 1.0)
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.boxes, s.boxes)

    def test_scale_maps_marked_pixel(self):
        img = np.zeros((3, 32, 32))
        img[:, 8, 8] = 1.0  # pixel center (8.5, 8.5) lies 7.5 px up-left of the center
        s = LabeledSample(img, np.zeros((0, 4)), np.zeros(0, int))
        out = scale_jitter(s, 1.25)
        # zoomed, it sits 7.5 * 1.25 px from the center, at 6.625, nearest pixel center 6.5
        y, x = np.unravel_index(out.image[0].argmax(), (32, 32))
        assert (y, x) == (6, 6)

    def test_without_flip_enabled_no_flip(self):
        s = LabeledSample(np.zeros((3, 16, 16)), np.array([[4.0, 4.0, 4.0, 4.0]]), np.array([0]))
        for seed in range(50):
            out = initial_augment(s, seed, enable_flip=False)
            # scale jitter moves the box toward/away from the center but never across it
            assert np.all(out.boxes[:, :2] < 8)

    def test_fuzz_boxes_valid(self):
        rng = np.random.default_rng(1)
        base = toy_sample(rng)
        base = dataclasses.replace(base, boxes=np.array([[3.0, 3.0, 6.0, 6.0], [16.0, 16.0, 30.0, 30.0],
                                                         [29.0, 10.0, 6.0, 14.0]]), classes=np.zeros(3, int))
        for seed in range(1000):
            out = initial_augment(base, seed, True)
            assert len(out.boxes) + out.dropped_boxes == 3
            if len(out.boxes):
                c = out.boxes
                assert np.all(c[:, 2:] > 0)
                assert np.all(c[:, :2] - c[:, 2:] / 2 >= -1e-9)
                assert np.all(c[:, :2] + c[:, 2:] / 2 <= 32 + 1e-9)
            assert out.image.min() >= 0 and out.image.max() <= 1

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_pair_contract(self, seed):
        s = initial_augment(toy_sample(), seed, True)
        pair = make_pair(s, seed)
        np.testing.assert_array_equal(pair.teacher_image, flip_image(pair.student.image, pair.kind))
        np.testing.assert_array_equal(flip_image(pair.teacher_image, pair.kind), pair.student.image)
        np.testing.assert_array_equal(pair.teacher_boxes, flip_box(pair.student.boxes, pair.kind, (32, 32)))

    def test_recorded_kind_matches_marked_corner(self):
        img = np.zeros((3, 8, 8))
        img[:, 0, 0] = 1.0
        s = LabeledSample(img, np.zeros((0, 4)), np.zeros(0, int))
        where = {FlipKind.HORIZONTAL: (0, 7), FlipKind.VERTICAL: (7, 0), FlipKind.ROTATE180: (7, 7)}
        for seed in range(30):
            pair = make_pair(s, seed)
            assert pair.teacher_image[0][where[pair.kind]] == 1.0

    def test_kind_distribution_uniform(self):
        s = LabeledSample(np.zeros((3, 8, 8)), np.zeros((0, 4)), np.zeros(0, int))
        n = 10_000
        counts = {k: 0 for k in FLIP_KINDS}
        for seed in range(n):
            counts[make_pair(s, [seed, 1]).kind] += 1
        sigma = np.sqrt(n * (1 / 3) * (2 / 3))
        for c in counts.values():
            assert abs(c - n / 3) < 3 * sigma

    def test_flip_sample_involution(self):
        s = toy_sample()
        for kind in FLIP_KINDS:
            back = flip_sample(flip_sample(s, kind), kind)
            np.testing.assert_array_equal(back.image, s.image)
            np.testing.assert_allclose(back.boxes, s.boxes, atol=1e-12)
