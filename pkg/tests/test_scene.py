import json

import numpy as np
import png
import pytest
from scipy import ndimage

from nucuap.cli import main
from nucuap.errors import FrameIOError, SceneSpecError, TensorFormatError
from nucuap.scene import (
    BackgroundSpec,
    FrameSequence,
    ObjectSpec,
    SceneSpec,
    background_texture,
    generate_scene,
    load_frames,
    load_tensor,
    random_scene_spec,
    read_png,
    save_tensor,
    write_frames,
    write_png,
)


def test_frame_sequence_validates():
    with pytest.raises(ValueError):
        FrameSequence(np.full((1, 2, 2, 1), 1.5, np.float32))
    with pytest.raises(ValueError):
        FrameSequence(np.zeros((0, 2, 2, 1), np.float32))
    seq = FrameSequence(np.zeros((2, 3, 4, 1), np.float32))
    assert (seq.frame_count, seq.height, seq.width, seq.channels) == (2, 3, 4, 1)
    with pytest.raises(ValueError):
        seq.frames[0, 0, 0, 0] = 1.0


def test_single_static_disk():
    obj = ObjectSpec("disk", 5.0, (16.0, 16.0), (0.0, 0.0), 1.0)
    seq, gt = generate_scene(SceneSpec(32, 32, 1, 1, (obj,), BackgroundSpec(0.2, 0.05, 0)))
    bright = seq.frames[0, :, :, 0] == 1.0
    labels, n = ndimage.label(bright)
    assert n == 1
    assert abs(bright.sum() - np.pi * 25) <= 2 * np.pi * 5
    assert gt.boxes[0] == [(11, 11, 22, 22)]


def test_no_objects_is_background():
    spec = SceneSpec(16, 16, 3, 2, (), BackgroundSpec(0.3, 0.05, 7))
    seq, gt = generate_scene(spec)
    assert np.all(seq.frames <= 0.3 + 0.05 + 1e-6)
    np.testing.assert_allclose(seq.frames[0], background_texture(spec), atol=1e-7)
    assert gt.boxes == [[], []]


def test_boxes_translate_with_velocity():
    objs = (
        ObjectSpec("disk", 4.0, (10.0, 8.0), (0.0, 2.0), 0.9),
        ObjectSpec("disk", 4.0, (40.0, 8.0), (0.0, 2.0), 0.9),
    )
    _, gt = generate_scene(SceneSpec(64, 64, 3, 10, objs, BackgroundSpec()))
    for b in range(1, 10):
        for k in range(2):
            prev, cur = gt.boxes[b - 1][k], gt.boxes[b][k]
            assert (cur[0] - prev[0], cur[2] - prev[2]) == (2, 2)
            assert (cur[1], cur[3]) == (prev[1], prev[3])


def test_scene_is_deterministic():
    spec = random_scene_spec(seed=11)
    a, _ = generate_scene(spec)
    b, _ = generate_scene(spec)
    assert np.array_equal(a.frames, b.frames)
    assert np.all((a.frames >= 0) & (a.frames <= 1))


@pytest.mark.parametrize("obj, msg", [
    (ObjectSpec("disk", 5.0, (3.0, 16.0), (0.0, 0.0), 0.9), "leaves"),
    (ObjectSpec("disk", 5.0, (16.0, 16.0), (0.0, 0.0), 0.4), "above the background"),
    (ObjectSpec("star", 5.0, (16.0, 16.0), (0.0, 0.0), 0.9), "shape"),
])
def test_invalid_specs(obj, msg):
    with pytest.raises(SceneSpecError, match=msg):
        generate_scene(SceneSpec(32, 32, 3, 1, (obj,), BackgroundSpec()))


def test_object_leaving_later_frame():
    obj = ObjectSpec("square", 3.0, (16.0, 5.0), (0.0, -1.0), 0.9)
    with pytest.raises(SceneSpecError, match="frame 3"):
        generate_scene(SceneSpec(32, 32, 1, 4, (obj,), BackgroundSpec()))


def test_random_spec_separation():
    spec = random_scene_spec(seed=3)
    assert len(spec.objects) == 2
    spec.validate()


def test_tensor_round_trip(tmp_path, rng):
    t = rng.normal(size=(2, 3, 1)).astype(np.float32)
    save_tensor(t, tmp_path / "t.uapt")
    back = load_tensor(tmp_path / "t.uapt")
    assert back.dtype == np.float32 and back.shape == (2, 3, 1)
    assert np.array_equal(back.view(np.uint32), t.view(np.uint32))


def test_tensor_layout(tmp_path):
    save_tensor(np.arange(6, dtype=np.float32).reshape(2, 3), tmp_path / "t.uapt")
    raw = (tmp_path / "t.uapt").read_bytes()
    assert raw[:4] == b"UAPT" and raw[4:7] == bytes([1, 1, 2])
    assert raw[7:15] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[15:19] == np.float32(0).tobytes() and len(raw) == 15 + 24


def test_tensor_bad_magic(tmp_path):
    (tmp_path / "t.uapt").write_bytes(b"NOPE\x01\x01\x00")
    with pytest.raises(TensorFormatError, match="magic"):
        load_tensor(tmp_path / "t.uapt")


def test_tensor_bad_version(tmp_path):
    (tmp_path / "t.uapt").write_bytes(b"UAPT\x02\x01\x00")
    with pytest.raises(TensorFormatError, match="version"):
        load_tensor(tmp_path / "t.uapt")


def test_tensor_truncated(tmp_path):
    header = b"UAPT\x01\x01\x02" + (4).to_bytes(4, "little") * 2
    (tmp_path / "t.uapt").write_bytes(header + np.zeros(12, "<f4").tobytes())
    with pytest.raises(TensorFormatError, match="truncated"):
        load_tensor(tmp_path / "t.uapt")


def test_tensor_rejects_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        save_tensor(np.array([np.inf], np.float32), tmp_path / "t.uapt")


def test_png_round_trip_8bit(tmp_path, rng):
    img = rng.uniform(size=(5, 6, 3))
    write_png(img, tmp_path / "a.png")
    back = read_png(tmp_path / "a.png")
    np.testing.assert_allclose(back, np.rint(img * 255) / 255, atol=1e-7)


def test_png_16bit_normalization(tmp_path):
    data = np.array([[0, 1000, 65535]], dtype=np.uint16)
    with open(tmp_path / "g.png", "wb") as fh:
        png.Writer(3, 1, greyscale=True, bitdepth=16).write(fh, data)
    seq = load_frames(tmp_path)
    np.testing.assert_allclose(seq.frames[0, 0, :, 0], data[0] / 65535.0, rtol=1e-6)


def test_load_identical_pngs(tmp_path):
    img = np.full((8, 8, 1), 0.5)
    for i in range(3):
        write_png(img, tmp_path / f"f{i}.png")
    seq = load_frames(tmp_path)
    assert seq.frame_count == 3
    assert np.array_equal(seq.frames[0], seq.frames[2])


def test_load_orders_by_name_and_reads_tensors(tmp_path):
    save_tensor(np.full((4, 4, 1), 0.25, np.float32), tmp_path / "b.uapt")
    save_tensor(np.full((4, 4), 2.0, np.float32), tmp_path / "a.uapt")
    seq = load_frames(tmp_path)
    assert seq.frames[0, 0, 0, 0] == 1.0  # clamped
    assert seq.frames[1, 0, 0, 0] == 0.25


def test_load_errors(tmp_path):
    with pytest.raises(FrameIOError, match="no .png"):
        load_frames(tmp_path)
    write_png(np.zeros((4, 4, 1)), tmp_path / "a.png")
    write_png(np.zeros((5, 4, 1)), tmp_path / "b.png")
    with pytest.raises(FrameIOError, match="expected"):
        load_frames(tmp_path)
    (tmp_path / "c.png").write_bytes(b"not a png")
    with pytest.raises(FrameIOError):
        load_frames(tmp_path)


def test_write_frames_round_trip(tmp_path, small_scene):
    seq, _ = small_scene
    write_frames(seq, tmp_path, bitdepth=16)
    back = load_frames(tmp_path)
    np.testing.assert_allclose(back.frames, seq.frames, atol=1 / 65535)


def test_cmd_gen_scene(tmp_path):
    assert main(["gen-scene", "--out", str(tmp_path / "a"), "--seed", "4"]) == 0
    assert main(["gen-scene", "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
    seq = load_frames(tmp_path / "a" / "frames")
    assert seq.frames.shape == (8, 64, 64, 3)
    for f in sorted((tmp_path / "a" / "frames").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "frames" / f.name).read_bytes()
    meta = json.loads((tmp_path / "a" / "ground_truth.json").read_text())
    assert len(meta["boxes"]) == 8 and len(meta["boxes"][0]) == 2


def test_cmd_gen_scene_invalid(tmp_path, capsys):
    rc = main(["gen-scene", "--out", str(tmp_path), "--set", "scene.intensity=0.3"])
    assert rc == 1
    assert "error" in capsys.readouterr().err
