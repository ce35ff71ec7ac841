import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage, stats

from oracles import cross_entropy_loop
from seunet.data import (
    Dataset,
    dataset_files,
    generate_shapes_dataset,
    load_dataset,
    read_pnm,
    save_dataset,
    split_dataset,
    write_pnm,
)
from seunet.models import ModelConfig, build_seunet, build_unet
from seunet.rng import make_rng
from seunet.tensor import Tensor
from seunet.training import (
    TrainConfig,
    TrainingDiverged,
    cross_entropy_loss,
    draw_jitter_scale,
    scale_jitter,
    train,
)

# ---------------------------------------------------------------- loss


def test_uniform_prediction_loss():
    p = Tensor(np.full((2, 4, 4, 3), 1 / 3))
    assert float(cross_entropy_loss(p, np.zeros((2, 4, 4), int)).data) == pytest.approx(math.log(3), rel=1e-12)


def test_confident_correct_prediction_loss():
    y = np.random.default_rng(0).integers(0, 3, (3, 5))
    p = np.eye(3)[y]
    assert float(cross_entropy_loss(Tensor(p), y).data) <= 1e-6


def test_floor_caps_confident_mistakes():
    p = Tensor(np.array([[1.0, 0.0]]))
    assert float(cross_entropy_loss(p, np.array([1])).data) == pytest.approx(-math.log(1e-7))


@pytest.mark.parametrize("seed", range(20))
def test_loss_matches_loop(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(2, 3, 4, 3))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    y = r.integers(0, 3, (2, 3, 4))
    assert abs(float(cross_entropy_loss(Tensor(p), y).data) - cross_entropy_loop(p, y)) <= 1e-12


def test_out_of_range_target_rejected():
    with pytest.raises(ValueError, match="classes"):
        cross_entropy_loss(Tensor(np.full((1, 2, 3), 1 / 3)), np.array([[0, 3]]))


# ---------------------------------------------------------------- jitter


def test_unit_range_is_identity(rng):
    im, m = rng.random((10, 12, 1)), rng.integers(0, 3, (10, 12))
    a, b = scale_jitter(im, m, 1.0, rng)
    np.testing.assert_array_equal(a, im)
    np.testing.assert_array_equal(b, m)


def test_jitter_factor_is_log_uniform():
    r = np.random.default_rng(11)
    logs = np.log([draw_jitter_scale(4.0, r) for _ in range(10_000)])
    assert logs.min() >= -math.log(4) and logs.max() <= math.log(4)
    assert stats.kstest(logs, stats.uniform(-math.log(4), 2 * math.log(4)).cdf).pvalue > 0.01


def test_jitter_range_validated(rng):
    with pytest.raises(ValueError):
        draw_jitter_scale(0.5, rng)


@given(st.integers(0, 10**6), st.floats(1.0, 4.0), st.integers(6, 30), st.integers(6, 30))
def test_jitter_keeps_extents_and_labels(seed, r, h, w):
    g = np.random.default_rng(seed)
    im, m = g.random((h, w, 1)).astype(np.float32), g.integers(0, 3, (h, w)).astype(np.uint8)
    a, b = scale_jitter(im, m, r, g)
    assert a.shape == im.shape and b.shape == m.shape
    assert a.dtype == im.dtype and b.dtype == m.dtype
    assert set(np.unique(b)) <= {0, 1, 2}


def test_shrinking_pads_mask_with_background(rng):
    im = np.ones((40, 40, 1))
    m = np.full((40, 40), 2, np.uint8)
    r = np.random.default_rng(5)
    for _ in range(20):
        a, b = scale_jitter(im, m, 4.0, r)
        if (b == 0).any():
            np.testing.assert_array_equal(a, 1.0)  # edge replication of a constant image
            return
    pytest.fail("no shrinking draw in 20 tries")


# ---------------------------------------------------------------- dataset


def test_dataset_is_deterministic():
    a = generate_shapes_dataset(6, extent=48, base_radius=6, rng=9)
    b = generate_shapes_dataset(6, extent=48, base_radius=6, rng=9)
    for x, y in zip(a.images + a.masks, b.images + b.masks):
        assert x.tobytes() == y.tobytes()


def test_sample_independent_of_count():
    a = generate_shapes_dataset(3, extent=48, base_radius=6, rng=2)
    b = generate_shapes_dataset(5, extent=48, base_radius=6, rng=2)
    np.testing.assert_array_equal(a.images[2], b.images[2])


def test_all_classes_present():
    ds = generate_shapes_dataset(10, extent=64, base_radius=8, rng=0)
    assert set(np.unique(np.stack(ds.masks))) == {0, 1, 2}


def test_doubling_scale_quadruples_area():
    area = {}
    for s in (1.0, 2.0):
        ds = generate_shapes_dataset(200, extent=96, base_radius=6, scale_factor=s, rng=4)
        counts = []
        for m in ds.masks:
            # one object per connected component of any foreground class
            lab, n = ndimage.label(m > 0)
            counts.extend(np.bincount(lab.ravel())[1:])
        area[s] = np.mean(counts)
    assert area[2.0] / area[1.0] == pytest.approx(4.0, rel=0.15)


def test_masks_follow_object_geometry():
    ds = generate_shapes_dataset(20, extent=64, base_radius=8, rng=1)
    yy, xx = np.mgrid[0:64, 0:64]
    for m in ds.masks:
        for kind in (1, 2):
            lab, n = ndimage.label(m == kind)
            for i in range(1, n + 1):
                comp = lab == i
                cy, cx = yy[comp].mean(), xx[comp].mean()
                rho = np.hypot(yy - cy, xx - cx)
                outer = rho[comp].max()
                assert 0.8 * 8 - 1 <= outer <= 1.2 * 8 + 1
                # mask pixels are exactly the sites inside the circle: no ragged or resampled edge
                inner = 0.0 if kind == 1 else 0.5 * outer + 1.5
                assert comp[(rho > inner) & (rho < outer - 1.5)].mean() > 0.99
                if kind == 2:
                    assert not comp[rho < 0.5 * outer - 1.5].any()


def test_mask_values_are_labels(rng):
    with pytest.raises(ValueError, match="labels"):
        Dataset([np.zeros((4, 4, 1))], [np.full((4, 4), 3)], {"num_classes": 3})
    with pytest.raises(ValueError, match="extents"):
        Dataset([np.zeros((4, 4, 1))], [np.zeros((4, 5), int)])


def test_generator_validation():
    with pytest.raises(ValueError):
        generate_shapes_dataset(1, scale_factor=0)
    with pytest.raises(ValueError, match="cannot fit"):
        generate_shapes_dataset(1, extent=16, base_radius=20)


def test_pnm_round_trip(tmp_path, rng):
    for shape, suffix in (((5, 7), "pgm"), ((5, 7, 3), "ppm")):
        a = rng.integers(0, 256, shape).astype(np.uint8)
        write_pnm(tmp_path / f"x.{suffix}", a)
        np.testing.assert_array_equal(read_pnm(tmp_path / f"x.{suffix}"), a)


def test_pnm_header_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.pgm"), [[7, 9]])


def test_pnm_rejects_bad_files(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError, match="binary"):
        read_pnm(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_pnm(tmp_path / "b.pgm")
    with pytest.raises(ValueError):
        write_pnm(tmp_path / "c.pgm", np.zeros((2, 2)))


def test_dataset_round_trip_and_manifest(tmp_path):
    ds = generate_shapes_dataset(4, extent=32, base_radius=4, rng=5)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    for a, b in zip(ds.images + ds.masks, back.images + back.masks):
        np.testing.assert_array_equal(a, b)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["generator"]["seed"] == 5
    assert [p["mask"] for p in manifest["pairs"]] == [f"masks/{i:05d}.pgm" for i in range(4)]
    assert dataset_files(tmp_path)[0] == "images/00000.pgm"


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_split():
    a, b = split_dataset(generate_shapes_dataset(5, extent=32, base_radius=4, rng=0), 3)
    assert (len(a), len(b)) == (3, 2)


# ---------------------------------------------------------------- training loop


def tiny(kind="seunet", **kw):
    cfg = ModelConfig(**{"height": 2, "filters": 4, "num_scales": 3, **kw})
    return (build_seunet if kind == "seunet" else build_unet)(cfg, make_rng(0))


@pytest.fixture(scope="module")
def data32():
    ds = generate_shapes_dataset(40, extent=32, base_radius=3.2, rng=8)
    return split_dataset(ds, 32)


def test_zero_epochs_keeps_weights(data32, tmp_path):
    m = tiny()
    before = {k: v.copy() for k, v in m.state_arrays().items()}
    rep = train(m, *data32, TrainConfig(epochs=0), weight_path=tmp_path / "w")
    assert rep.epochs == [] and rep.to_csv() == "epoch,loss,val_loss,val_miou,lr\n"
    for k, v in m.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])
    assert (tmp_path / "w").exists()


def test_five_epochs_reduce_loss_and_repeat_bitwise(data32):
    reps = [train(tiny(dropout=0.25), *data32, TrainConfig(epochs=5, seed=3, jitter=2.0)) for _ in range(2)]
    assert reps[0].loss[-1] < reps[0].loss[0]
    assert reps[0].epochs == [0, 1, 2, 3, 4]
    assert reps[0].to_csv() == reps[1].to_csv()


def test_empty_sets_rejected(data32):
    with pytest.raises(ValueError, match="non-empty"):
        train(tiny(), data32[0].subset([]), data32[1], TrainConfig(epochs=1))


def test_divergence_reported(data32):
    m = tiny()
    m.params["head.bias"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(m, *data32, TrainConfig(epochs=1))


def test_train_config_validation():
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(schedule="cosine"), dict(jitter=0.5)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


@pytest.mark.parametrize("kind", ["seunet", "unet"])
def test_memorises_four_samples(kind):
    ds = generate_shapes_dataset(4, extent=32, base_radius=3.2, rng=3)
    m = tiny(kind, filters=8)
    rep = train(m, ds, ds, TrainConfig(epochs=200, batch_size=1, seed=0))
    assert min(rep.loss) < 0.05
