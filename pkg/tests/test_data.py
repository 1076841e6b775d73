import json

import numpy as np
import pytest
import torch
from PIL import Image

from nerfmark.autodiff import Rng
from nerfmark.data import (
    NERF_SYNTHETIC_FOV,
    SceneError,
    generate_image_corpus,
    generate_toy_scene,
    load_scene,
    make_logo,
    random_mark,
    quantize,
    read_image,
    write_image,
    write_scene,
)

MATRIX_A = [
    [1.0, 0.0, 0.0, 0.5],
    [0.0, 0.0, -1.0, -4.0],
    [0.0, 1.0, 0.0, 0.25],
    [0.0, 0.0, 0.0, 1.0],
]
MATRIX_B = [
    [0.0, 0.0, 1.0, 4.0],
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 1.0],
    [0.0, 0.0, 0.0, 1.0],
]


def write_fixture(root, rgba_second=False, drop=None):
    (root / "train").mkdir(parents=True)
    Image.fromarray(np.full((4, 4, 3), [10, 20, 30], np.uint8)).save(root / "train" / "r_0.png")
    second = np.zeros((4, 4, 4), np.uint8)
    second[..., :3] = [200, 100, 50]
    second[..., 3] = 255
    second[0, 0] = [90, 80, 70, 0]
    if rgba_second:
        Image.fromarray(second, "RGBA").save(root / "train" / "r_1.png")
    else:
        Image.fromarray(second[..., :3]).save(root / "train" / "r_1.png")
    frames = [
        {"file_path": "./train/r_0", "transform_matrix": MATRIX_A},
        {"file_path": "./train/r_1", "transform_matrix": MATRIX_B},
    ]
    if drop is not None:
        (root / "train" / f"r_{drop}.png").unlink()
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.5, "frames": frames}))


def test_fixture_scene_loads(tmp_path):
    write_fixture(tmp_path)
    scene = load_scene(tmp_path)
    assert len(scene.frames) == 2 and scene.camera_angle_x == 0.5
    assert np.array_equal(scene.frames[0].pose.camera_to_world, np.array(MATRIX_A))
    assert np.array_equal(scene.frames[1].pose.camera_to_world, np.array(MATRIX_B))
    assert scene.resolution == (4, 4)
    assert torch.allclose(scene.frames[0].image[:, 0, 0], torch.tensor([10, 20, 30]) / 255.0)


def test_missing_image_names_file_path(tmp_path):
    write_fixture(tmp_path, drop=1)
    with pytest.raises(SceneError, match="r_1"):
        load_scene(tmp_path)


def test_malformed_json(tmp_path):
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(SceneError, match="transforms_train.json"):
        load_scene(tmp_path)


def test_no_transforms(tmp_path):
    with pytest.raises(SceneError, match="no transforms"):
        load_scene(tmp_path)


def test_non_orthonormal_pose_rejected(tmp_path):
    write_fixture(tmp_path)
    doc = json.loads((tmp_path / "transforms_train.json").read_text())
    doc["frames"][1]["transform_matrix"][0][0] = 2.0
    (tmp_path / "transforms_train.json").write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="frame 1"):
        load_scene(tmp_path)


def test_transparent_pixel_becomes_white(tmp_path):
    write_fixture(tmp_path, rgba_second=True)
    img = load_scene(tmp_path).frames[1].image
    assert torch.equal(img[:, 0, 0], torch.ones(3))
    assert torch.allclose(img[:, 1, 1], torch.tensor([200, 100, 50]) / 255.0)


def test_write_read_quantized_is_exact(tmp_path):
    img = quantize(Rng(0).uniform((3, 8, 8)))
    write_image(tmp_path / "a.png", img)
    assert torch.equal(read_image(tmp_path / "a.png"), img)


def test_quantization_rule(tmp_path):
    img = torch.tensor([0.5, 1.2, -0.3, 0.5 / 255]).reshape(1, 1, 4).expand(3, 1, 4)
    write_image(tmp_path / "q.png", img)
    raw = np.asarray(Image.open(tmp_path / "q.png"))
    assert raw[0, :, 0].tolist() == [128, 255, 0, 1]


def test_writer_byte_stable(tmp_path):
    img = Rng(1).uniform((3, 8, 8))
    write_image(tmp_path / "a.png", img)
    write_image(tmp_path / "b.png", img)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_toy_scene_deterministic():
    a = generate_toy_scene("sphere", 4, 16, Rng(3))
    b = generate_toy_scene("sphere", 4, 16, Rng(3))
    for fa, fb in zip(a.frames, b.frames):
        assert fa.image.numpy().tobytes() == fb.image.numpy().tobytes()
        assert np.array_equal(fa.pose.camera_to_world, fb.pose.camera_to_world)


@pytest.mark.parametrize("kind", ["sphere", "cube"])
def test_mirror_views_differ_and_background_white(kind):
    scene = generate_toy_scene(kind, 8, 32, Rng(4))
    front, back = scene.frames[0].image, scene.frames[4].image
    assert scene.frames[4].theta == 180.0
    assert (front - back).abs().max() > 0.1
    # corners see only background
    for img in (front, back):
        assert torch.equal(img[:, 0, 0], torch.ones(3)) and torch.equal(img[:, -1, -1], torch.ones(3))


def test_toy_scene_arguments():
    with pytest.raises(ValueError):
        generate_toy_scene("torus", 4, 8, Rng(0))
    with pytest.raises(ValueError):
        generate_toy_scene("sphere", 1, 8, Rng(0))
    scene = generate_toy_scene("cube", 3, 8, Rng(0), thetas=[10.0, 20.0, 30.0])
    assert [f.theta for f in scene.frames] == [10.0, 20.0, 30.0]
    assert scene.camera_angle_x == NERF_SYNTHETIC_FOV


def test_scene_round_trip(tmp_path):
    scene = generate_toy_scene("cube", 3, 16, Rng(5))
    write_scene(tmp_path, scene)
    back = load_scene(tmp_path)
    for f0, f1 in zip(scene.frames, back.frames):
        assert np.abs(f0.pose.camera_to_world - f1.pose.camera_to_world).max() < 1e-7
        assert torch.equal(quantize(f0.image), f1.image)
        assert f1.theta == f0.theta


def test_corpus_and_logo():
    corpus = generate_image_corpus(6, 16, Rng(6))
    assert corpus.shape == (6, 3, 16, 16)
    assert corpus.min() >= 0 and corpus.max() <= 1
    again = generate_image_corpus(6, 16, Rng(6))
    assert torch.equal(corpus, again)
    logo = make_logo(32)
    assert logo.shape == (3, 32, 32)
    assert torch.allclose(torch.unique(logo), torch.tensor([0.15, 0.85]))


def test_random_marks_are_two_level_and_vary():
    a = random_mark(Rng(7), 32)
    b = random_mark(Rng(8), (16, 24))
    assert a.shape == (3, 32, 32) and b.shape == (3, 16, 24)
    assert len(torch.unique(a)) == 2 and a.min() >= 0.05 and a.max() <= 0.95
    assert torch.equal(a, random_mark(Rng(7), 32))
    assert not torch.equal(a, random_mark(Rng(9), 32))
