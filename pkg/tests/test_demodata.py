import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexhand.control import N_JOINTS, binarize_deltas
from dexhand.demodata import (
    DemoFrame,
    DemoRecording,
    PreprocessConfig,
    augment_luminance,
    build_dataset,
    make_metadata,
    perturbed_start,
    preprocess_image,
    read_ppm,
    read_recording,
    record_demonstration,
    rgb_to_yuv,
    write_ppm,
    write_recording,
)
from dexhand.errors import MissingImageError, ParseError, RangeError, SizeError
from dexhand.simplant import SceneSpec, default_scripts

angle = st.floats(-90, 90, allow_nan=False)
frames_st = st.lists(st.tuples(st.floats(0.001, 1.0), st.lists(angle, min_size=15, max_size=15)),
                     max_size=20)


def _recording(steps):
    t, frames = 0.0, []
    for dt, angles in steps:
        t += dt
        frames.append(DemoFrame(t, angles))
    return DemoRecording(make_metadata("cup-grasp", 30.0, "2020-01-01T00:00:00+00:00"), frames)


def _ramp(n, joint=3, rate=1.0):
    frames = []
    for k in range(n):
        q = np.zeros(N_JOINTS)
        q[joint] = rate * k
        frames.append(DemoFrame(k / 30, q, {"scene": SceneSpec("cup-grasp").to_dict(), "z": 250.0}))
    return DemoRecording(make_metadata("cup-grasp", 30.0, "2020-01-01T00:00:00+00:00"), frames)


class TestRecordingIO:
    def test_empty_roundtrip(self, tmp_path):
        rec = _recording([])
        back = read_recording(write_recording(rec, tmp_path / "r.jsonl"))
        assert back == rec

    @settings(max_examples=30, deadline=None)
    @given(frames_st)
    def test_roundtrip_is_identity(self, tmp_path_factory, steps):
        rec = _recording(steps)
        path = tmp_path_factory.mktemp("rec") / "r.jsonl"
        back = read_recording(write_recording(rec, path))
        assert back.metadata == rec.metadata
        for a, b in zip(back.frames, rec.frames):
            assert a.t == b.t and a.angles == b.angles  # bit-exact floats
        assert len(back.frames) == len(rec.frames)

    def test_truncated_line_reports_its_number(self, tmp_path):
        rec = _ramp(10)
        path = write_recording(rec, tmp_path / "r.jsonl")
        lines = path.read_text().splitlines()
        lines[6] = lines[6][: len(lines[6]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            read_recording(path)
        assert err.value.line == 7

    def test_bad_frame_keys(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text(json.dumps({"task": "x"}) + "\n" + json.dumps({"t": 0, "angles": [0] * 14}) + "\n")
        with pytest.raises(ParseError) as err:
            read_recording(path)
        assert err.value.line == 2


class TestPreprocess:
    def test_white_is_full_luma_neutral_chroma(self):
        out = preprocess_image(np.full((160, 320, 3), 255, np.uint8))
        assert np.allclose(out[..., 0], 1.0, atol=1e-6)
        assert np.allclose(out[..., 1:], 0.5, atol=1e-6)

    def test_yuv_primaries(self):
        # independent check against the defining luma weights
        rgb = np.eye(3)
        yuv = rgb_to_yuv(rgb)
        assert np.allclose(yuv[:, 0], [0.299, 0.587, 0.114])
        assert np.allclose(yuv[2, 1], 1.0) and np.allclose(yuv[0, 2], 1.0)

    def test_blur_keeps_constant_image(self):
        img = np.full((160, 320, 3), 77, np.uint8)
        cfg = PreprocessConfig(to_yuv=False)
        assert np.allclose(preprocess_image(img, cfg), 77 / 255, atol=1e-6)

    def test_blur_matches_direct_convolution(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (160, 320, 3), dtype=np.uint8)
        out = preprocess_image(img, PreprocessConfig(to_yuv=False))
        x = img[..., 0].astype(float) / 255
        k = np.exp(-0.5 * np.arange(-3, 4) ** 2)
        k /= k.sum()
        padded = np.pad(x, 3, mode="edge")
        rows = sum(k[i] * padded[i:i + 160, :] for i in range(7))
        ref = sum(k[i] * rows[:, i:i + 320] for i in range(7))
        assert np.allclose(out[..., 0], ref, atol=1e-5)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_output_range(self, seed):
        img = np.random.default_rng(seed).integers(0, 256, (160, 320, 3), dtype=np.uint8)
        out = preprocess_image(img)
        assert out.dtype == np.float32 and out.min() >= 0 and out.max() <= 1

    def test_normalize_only_is_idempotent(self):
        img = np.random.default_rng(1).random((160, 320, 3))
        cfg = PreprocessConfig(to_yuv=False, blur_sigma=0.0)
        once = preprocess_image(img, cfg)
        assert np.array_equal(preprocess_image(once, cfg), once)

    def test_size_error(self):
        with pytest.raises(SizeError):
            preprocess_image(np.zeros((100, 100, 3), np.uint8))

    def test_augment(self):
        x = np.full((160, 320, 3), 0.5, np.float32)
        assert np.array_equal(augment_luminance(x, 1.0), x)
        out = augment_luminance(x, 0.2)
        assert np.allclose(out[..., 0], 0.1) and np.array_equal(out[..., 1:], x[..., 1:])
        with pytest.raises(RangeError):
            augment_luminance(x, 1.5)

    def test_ppm_roundtrip(self, tmp_path):
        img = np.random.default_rng(2).integers(0, 256, (7, 5, 3), dtype=np.uint8)
        img[0, 0] = (10, 32, 9)  # whitespace-valued bytes right after the header
        assert np.array_equal(read_ppm(write_ppm(img, tmp_path / "a.ppm")), img)


class TestDataset:
    def test_two_frames_give_one_sample(self):
        ds = build_dataset([_ramp(2)])
        assert len(ds) == 1 and ds.labels[0].tolist() == [0, 0, 0, 1] + [0] * 11

    def test_twenty_seconds_at_30hz(self):
        ds = build_dataset([_ramp(601, rate=0.1)], PreprocessConfig(blur_sigma=0.0))
        assert len(ds) == 600
        assert not ds.labels.any()  # 0.1 deg per frame is below threshold

    def test_labels_are_binarized_deltas(self):
        rec = record_demonstration(SceneSpec("foam-grasp"), seed=1)
        ds = build_dataset([rec])
        assert np.array_equal(ds.labels, binarize_deltas(rec.trajectory()))
        assert ds.labels.any()

    def test_missing_image(self):
        with pytest.raises(MissingImageError):
            build_dataset([_recording([(0.1, [0] * 15), (0.1, [1] * 15)])])

    def test_ppm_references(self, tmp_path):
        img = np.zeros((160, 320, 3), np.uint8)
        write_ppm(img, tmp_path / "f.ppm")
        frames = [DemoFrame(0.0, [0] * 15, "f.ppm"), DemoFrame(0.1, [2] * 15, "f.ppm")]
        rec = DemoRecording({"task": "cup-grasp"}, frames)
        ds = build_dataset([rec], base_dir=tmp_path)
        assert ds.labels.tolist() == [[1] * 15]

    def test_manifest(self):
        ds = build_dataset([_ramp(5)])
        m = ds.manifest(PreprocessConfig(), 0.5)
        assert m["samples"] == 4 and m["input_shape"] == [160, 320, 3]
        assert m["config_hash"] == PreprocessConfig().digest()


class TestDemonstrations:
    def test_expert_demo_succeeds(self):
        rec = record_demonstration(SceneSpec("cup-grasp"), seed=0)
        assert rec.metadata["success"] and len(rec.frames) > 30

    def test_perturbed_start_bounds(self):
        q = perturbed_start("foam-rotate", 3)
        scripted = {j: t for stage in default_scripts().stages("foam-rotate") for j, t in stage}
        for j in range(N_JOINTS):
            assert 0 <= q[j] <= scripted.get(j, 0) + 12

    def test_perturbed_demo_is_cut_short(self):
        q = np.zeros(N_JOINTS)
        q[1] = 40.0  # far past the 20 degree target
        rec = record_demonstration(SceneSpec("foam-grasp"), seed=0, initial_angles=q)
        assert not rec.metadata["success"]
        assert len(rec.frames) < 400
