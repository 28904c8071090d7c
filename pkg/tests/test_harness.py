import filecmp

import numpy as np
import pytest

from wegs.cloud import init_from_points
from wegs.harness import (
    DatasetError,
    EvalReport,
    SyntheticSceneSpec,
    evaluate,
    format_cameras,
    interpolate_appearance,
    interpolation_frames,
    masked_psnr,
    noise_retention,
    parse_cameras,
    predicted_mask,
    psnr,
    read_dataset,
    read_png,
    render_cloud,
    render_image,
    render_with,
    separation_score,
    style_transfer,
    synth,
    write_dataset,
    write_png,
)
from wegs.tensor import DimensionError
from wegs.trainer import TrainConfig, init_state, train

TINY = SyntheticSceneSpec(seed=1, n_gaussians=30, n_cameras=4, n_test_cameras=2, width=24, height=24,
                          focal=22.0, n_appearances=3, occluder_size=(4, 8))


@pytest.fixture(scope="module")
def tiny():
    return synth(TINY)


@pytest.fixture(scope="module")
def trained(tiny):
    cfg = TrainConfig(total_steps=12, channels=8, embed_dim=4, transfer_hidden=16, sh_degree=1, densify=False)
    return train(cfg, tiny.train, tiny.points)


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)
    with pytest.raises(DimensionError):
        psnr(a, np.zeros((4, 5, 3)))


def test_masked_psnr_ignores_masked_pixels():
    a, b = np.zeros((4, 4, 3)), np.zeros((4, 4, 3))
    b[0, 0] = 1.0
    static = np.ones((4, 4), bool)
    static[0, 0] = False
    assert masked_psnr(a, b, static) == 99.0
    b[1, 1] = 0.1
    assert masked_psnr(a, b, static) == pytest.approx(10 * np.log10(15 / 0.01))


def test_separation_score_examples():
    occ = np.zeros((2, 2), bool)
    occ[0] = True
    assert separation_score([np.where(occ, 0.0, 1.0)], [occ]) == pytest.approx(1.0)
    assert separation_score([np.full((2, 2), 0.3)], [occ]) == pytest.approx(0.0)
    assert separation_score([np.ones((2, 2))], [np.zeros((2, 2), bool)]) == 0.0


def test_synth_shapes(tiny):
    assert len(tiny.images) == 6 and tiny.n_train == 4
    assert all(im.pixels.shape == (3, 24, 24) and im.pixels.dtype == np.float32 for im in tiny.images)
    assert tiny.noise_start == 30 and len(tiny.points) == 33
    assert len(tiny.test) == 2 and all(im.id >= 4 for im in tiny.test)
    np.testing.assert_array_equal(tiny.gt_appearance[0], np.concatenate([np.eye(3), np.zeros((3, 1))], 1))


def test_synth_deterministic(tiny):
    again = synth(TINY)
    for a, b in zip(tiny.images, again.images):
        assert a.pixels.tobytes() == b.pixels.tobytes()
    assert tiny.points.points.tobytes() == again.points.points.tobytes()
    other = synth(SyntheticSceneSpec(**{**TINY.__dict__, "seed": 2}))
    assert any(a.pixels.tobytes() != b.pixels.tobytes() for a, b in zip(tiny.images, other.images))


def test_identity_appearance_without_occluders_matches_base_render():
    spec = SyntheticSceneSpec(**{**TINY.__dict__, "identity_appearance": True, "occluded_fraction": 0.0})
    ds = synth(spec)
    assert len(ds.points) == spec.n_gaussians
    for img in ds.images:
        ref = np.round(np.clip(render_cloud(ds.base_cloud, img.camera), 0, 1) * 255) / 255
        np.testing.assert_allclose(img.pixels.transpose(1, 2, 0), ref, atol=1e-6)
        assert not ds.gt_masks[img.id].any()


def test_occluder_pixels_match_mask(tiny):
    occluded = [i for i in range(tiny.n_train) if tiny.gt_masks[i].any()]
    assert len(occluded) == 2
    for i in occluded:
        px = tiny.images[i].pixels.transpose(1, 2, 0)
        clean = np.round(np.clip(render_cloud(tiny.base_cloud, tiny.images[i].camera)
                                 @ tiny.gt_appearance[i][:, :3].T + tiny.gt_appearance[i][:, 3], 0, 1) * 255) / 255
        np.testing.assert_allclose(px[~tiny.gt_masks[i]], clean[~tiny.gt_masks[i]], atol=1e-6)


def test_noise_points_lie_in_front_of_scene(tiny):
    noise = tiny.points.points[tiny.noise_start:]
    centre = tiny.base_cloud.means.mean(axis=0)
    cams = [im.camera for im in tiny.train]
    # every noise point is closer to some training camera than the scene centre is
    assert all(min(np.linalg.norm(p - c.center) - np.linalg.norm(centre - c.center) for c in cams) < 0
               for p in noise)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (5, 7, 3))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.shape == (5, 7, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6


def test_camera_text_round_trip(tiny):
    cams = parse_cameras(format_cameras(tiny.images))
    for img in tiny.images:
        c = cams[img.id]
        assert (c.width, c.height, c.fx, c.cx) == (img.camera.width, img.camera.height, img.camera.fx, img.camera.cx)
        np.testing.assert_array_equal(c.world_to_cam, img.camera.world_to_cam)
    with pytest.raises(DatasetError):
        parse_cameras("0 1 2 3")


def test_dataset_directory_round_trip(tmp_path, tiny):
    root = write_dataset(tiny, tmp_path / "a")
    write_dataset(synth(TINY), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    assert not any(cmp.subdirs[d].diff_files for d in cmp.subdirs)
    back = read_dataset(root)
    assert back.n_train == 4 and back.noise_start == 30
    for a, b in zip(tiny.images, back.images):
        np.testing.assert_array_equal(a.pixels, b.pixels)
    for i in tiny.gt_masks:
        np.testing.assert_array_equal(tiny.gt_masks[i], back.gt_masks[i])
    np.testing.assert_allclose(back.points.points, tiny.points.points)
    for i in tiny.gt_appearance:
        np.testing.assert_array_equal(back.gt_appearance[i], tiny.gt_appearance[i])


def test_read_dataset_errors(tmp_path, tiny):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)
    root = write_dataset(tiny, tmp_path / "d")
    (root / "images" / "0001.png").unlink()
    with pytest.raises(DatasetError, match="0001"):
        read_dataset(root)


def test_interpolate_examples():
    a, b = np.array([0.1, -2.0, 3.0], np.float32), np.array([1.0, 0.3, -1.0], np.float32)
    assert interpolate_appearance(a, b, 0).tobytes() == a.tobytes()
    assert interpolate_appearance(a, b, 1).tobytes() == b.tobytes()
    np.testing.assert_allclose(interpolate_appearance(a, b, 0.5), (a + b) / 2, rtol=1e-6)
    with pytest.raises(DimensionError):
        interpolate_appearance(a, b[:2], 0.5)


def test_interpolation_endpoints_match_renders(trained, tiny):
    la, lb = trained.embeddings[0], trained.embeddings[1]
    cam = tiny.test[0].camera
    frames = interpolation_frames(trained, la, lb, cam, 3)
    assert frames[0].tobytes() == render_with(trained, la, cam).tobytes()
    assert frames[-1].tobytes() == render_with(trained, lb, cam).tobytes()


def test_style_transfer_deterministic(trained, tiny):
    gray = np.full((24, 24, 3), 0.5, np.float32).transpose(2, 0, 1)
    cam = tiny.test[0].camera
    a = style_transfer(gray, trained, cam)
    b = style_transfer(gray, trained, cam)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (24, 24, 3) and a.min() >= 0 and np.isfinite(a).all()


def test_predicted_mask_range(trained, tiny):
    m = predicted_mask(trained, tiny.train[0])
    assert m.shape == (24, 24) and m.min() >= 0 and m.max() <= 1


def test_vanilla_mask_is_ones(tiny):
    state = init_state(TrainConfig(mode="vanilla", sh_degree=1), init_from_points(tiny.points, 1),
                       [im.camera for im in tiny.train])
    assert np.all(predicted_mask(state, tiny.train[0]) == 1)


def test_evaluate_does_not_touch_state(trained, tiny):
    before = {k: p.data.copy() for k, p in trained.gauss.items()}
    emb = {k: v.copy() for k, v in trained.embeddings.items()}
    r1 = evaluate(trained, tiny)
    r2 = evaluate(trained, tiny)
    assert r1.rows == r2.rows and r1.separation == r2.separation
    for k, p in trained.gauss.items():
        assert p.data.tobytes() == before[k].tobytes()
    assert all(trained.embeddings[k].tobytes() == emb[k].tobytes() for k in emb)
    assert [r["image"] for r in r1.rows] == [4, 5]
    out = render_image(trained, tiny.test[0])
    assert r1.rows[0]["psnr"] == pytest.approx(masked_psnr(out, tiny.test[0].pixels.transpose(1, 2, 0),
                                                           np.ones((24, 24), bool)))


def test_eval_report_csv():
    rep = EvalReport([{"image": 3, "split": "test", "psnr": 20.0, "ssim": 0.5}], 0.25)
    assert rep.to_csv().splitlines() == ["image,split,psnr,ssim", "3,test,20.000000,0.500000"]
    assert "separation=0.2500" in rep.summary()


def test_noise_retention(trained, tiny):
    assert noise_retention(trained, tiny.noise_start, len(tiny.points)) == 1.0
    assert noise_retention(trained, 33, 33) == 0.0


def test_explicit_appearance_transforms():
    gains = [np.concatenate([np.eye(3) * g, np.zeros((3, 1))], 1) for g in (0.5, 1.0)]
    ds = synth(SyntheticSceneSpec(**{**TINY.__dict__, "appearance_transforms": tuple(gains), "occluded_fraction": 0.0}))
    assert [ds.appearance_index[i] for i in range(6)] == [0, 1, 0, 1, 0, 1]
    np.testing.assert_array_equal(ds.gt_appearance[2], gains[0])
    assert ds.images[0].pixels.mean() < ds.images[1].pixels.mean()
