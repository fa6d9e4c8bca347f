import os

import numpy as np
import pytest

from stdetr import synthdata as SD
from stdetr.synthdata import (
    BadMagic,
    BadMode,
    DatasetSpec,
    Dataset,
    FrameSequence,
    ObjectsDontFit,
    TruncatedFile,
    VersionMismatch,
    generate_dataset,
    generate_sequence,
    read_dataset,
    render_input,
    write_dataset,
)


def test_generation_is_deterministic():
    spec = DatasetSpec(num_sequences=1, T=3, seed=7)
    a = generate_sequence(spec, 5)
    b = generate_sequence(spec, 5)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.flow, b.flow)
    assert a.gt_per_step == b.gt_per_step


def test_moving_objects_translate_exactly():
    spec = DatasetSpec(num_sequences=1, T=4, seed=1)
    for idx in range(10):
        seq = generate_sequence(spec, idx)
        n = spec.img_size
        for t in range(1, spec.T):
            prev = {round(b.cx * n - b.w * n / 2) for _, b in seq.gt_per_step[t - 1]}
            assert len(seq.gt_per_step[t]) == len(seq.gt_per_step[t - 1])
            for (_, b0), (_, b1) in zip(seq.gt_per_step[t - 1], seq.gt_per_step[t]):
                # per-object displacement equals per-object mean flow, exactly
                dx, dy = b1.cx - b0.cx, b1.cy - b0.cy
                x0 = round(b1.cx * n - b1.w * n / 2)
                y0 = round(b1.cy * n - b1.h * n / 2)
                s = round(b1.w * n)
                fx = seq.flow[t, 0, y0 : y0 + s, x0 : x0 + s]
                fy = seq.flow[t, 1, y0 : y0 + s, x0 : x0 + s]
                assert np.allclose(fx, np.float32(dx), atol=1e-7)
                assert np.allclose(fy, np.float32(dy), atol=1e-7)


def test_flow_zero_off_moving_pixels():
    spec = DatasetSpec(num_sequences=1, T=2, seed=2)
    seq = generate_sequence(spec, 0)
    n = spec.img_size
    assert np.all(seq.flow[0] == 0.0)
    mask = np.zeros((n, n), dtype=bool)
    for _, b in seq.gt_per_step[1]:
        x0 = round(b.cx * n - b.w * n / 2)
        y0 = round(b.cy * n - b.h * n / 2)
        s = round(b.w * n)
        mask[y0 : y0 + s, x0 : x0 + s] = True
    assert np.all(seq.flow[1, :, ~mask] == 0.0)
    assert np.all(np.abs(seq.flow[1, :, mask]).max(axis=0) > 0.0)


def test_boxes_inside_image():
    spec = DatasetSpec(num_sequences=1, T=4, seed=3)
    for idx in range(20):
        seq = generate_sequence(spec, idx)
        for step in seq.gt_per_step:
            for _, b in step:
                x0, y0, x1, y1 = b.corners()
                assert 0.0 <= x0 < x1 <= 1.0
                assert 0.0 <= y0 < y1 <= 1.0


def test_static_and_moving_share_appearance_samplers():
    # squares indistinguishable within one frame: sizes and intensities of
    # the rendered squares come from identical distributions by code path;
    # check a weaker observable: frame values bounded and squares present
    spec = DatasetSpec(num_sequences=1, T=2, seed=4)
    seq = generate_sequence(spec, 0)
    assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
    assert seq.frames.max() > spec.noise_amp  # some square is brighter than noise


def test_objects_dont_fit():
    spec = DatasetSpec(
        num_sequences=1,
        T=2,
        img_size=16,
        moving_range=(3, 3),
        static_range=(3, 3),
        size_range=(12, 14),
        seed=0,
    )
    with pytest.raises(ObjectsDontFit):
        generate_sequence(spec, 0)


def test_render_input_channel_counts():
    spec = DatasetSpec(num_sequences=1, T=2, seed=5)
    seq = generate_sequence(spec, 0)
    assert render_input(seq, "rgb", 1).shape[0] == 3
    assert render_input(seq, "rgb_rgb", 1).shape[0] == 6
    assert render_input(seq, "rgb_of", 1).shape[0] == 5
    with pytest.raises(BadMode):
        render_input(seq, "flow_only", 1)


def test_render_input_static_scene_flow_zero():
    spec = DatasetSpec(num_sequences=1, T=2, moving_range=(0, 0), seed=6)
    # moving_range lower bound 0 is allowed for eval-style degenerate scenes
    spec.velocity_range = (1, 3)
    seq = generate_sequence(spec, 0)
    assert seq.gt_per_step[1] == []
    x = render_input(seq, "rgb_of", 1)
    assert np.all(x[3:] == 0.0)


def test_render_input_rgb_rgb_boundary():
    spec = DatasetSpec(num_sequences=1, T=2, seed=7)
    seq = generate_sequence(spec, 0)
    x = render_input(seq, "rgb_rgb", 0)
    assert np.array_equal(x[:3], x[3:])


def test_dataset_roundtrip_bitwise(tmp_path):
    spec = DatasetSpec(num_sequences=4, T=2, img_size=32, seed=8)
    ds = generate_dataset(spec)
    p1 = str(tmp_path / "a.stds")
    p2 = str(tmp_path / "b.stds")
    write_dataset(ds, p1)
    ds2 = read_dataset(p1)
    write_dataset(ds2, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    for s1, s2 in zip(ds.sequences, ds2.sequences):
        assert np.array_equal(s1.frames, s2.frames)
        assert np.array_equal(s1.flow, s2.flow)
        assert s1.gt_per_step == s2.gt_per_step


def test_dataset_file_size_matches_header_prediction(tmp_path):
    spec = DatasetSpec(num_sequences=20, T=2, img_size=64, seed=9)
    ds = generate_dataset(spec)
    path = str(tmp_path / "c.stds")
    write_dataset(ds, path)
    import json
    import struct

    blob = open(path, "rb").read()
    (hlen,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9 : 9 + hlen])
    predicted = 9 + hlen
    for entry in header["sequences"]:
        predicted += 4 * (
            int(np.prod(entry["frames_shape"])) + int(np.prod(entry["flow_shape"]))
        )
    assert os.path.getsize(path) == predicted


def test_bad_magic(tmp_path):
    path = str(tmp_path / "bad.stds")
    with open(path, "wb") as f:
        f.write(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(BadMagic):
        read_dataset(path)


def test_version_mismatch(tmp_path):
    spec = DatasetSpec(num_sequences=1, T=1, img_size=32, seed=0)
    ds = generate_dataset(spec)
    path = str(tmp_path / "v.stds")
    write_dataset(ds, path)
    blob = bytearray(open(path, "rb").read())
    idx = blob.find(b'"version":1')
    blob[idx : idx + 11] = b'"version":9'
    with open(path, "wb") as f:
        f.write(blob)
    with pytest.raises(VersionMismatch):
        read_dataset(path)


def test_truncated_file(tmp_path):
    spec = DatasetSpec(num_sequences=1, T=1, img_size=32, seed=0)
    ds = generate_dataset(spec)
    path = str(tmp_path / "t.stds")
    write_dataset(ds, path)
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[: len(blob) - 100])
    with pytest.raises(TruncatedFile):
        read_dataset(path)
