import csv

import numpy as np
import pytest

from helpers import BOX, field_config_for, mix_config_for, tiny_dataset
from residual_nerf import autodiff as ad
from residual_nerf.fields import FieldBundle
from residual_nerf.renderer import CameraFrame, Rays, render_rays
from residual_nerf.scenes import Dataset, look_at
from residual_nerf.trainer import (Adam, OptimState, TrainConfig, adam_step, collect_rays,
                                   new_field, photometric_loss, train_background, train_residual,
                                   train_scratch, write_history)


@pytest.fixture(scope="module")
def dataset():
    return tiny_dataset()


def config(**kw):
    base = dict(epochs=1, rays_per_batch=128, n_samples=16, learning_rate=1e-2,
                grid_learning_rate=5e-2)
    base.update(kw)
    return TrainConfig(**base)


def dataset_loss(bundle, rays, mode="single", which="bg"):
    out = render_rays(bundle, Rays(rays.origins, rays.directions, rays.near, rays.far), mode,
                      16, white_background=True, which=which)
    return photometric_loss(out.rgb, rays.colors).item()


class TestLossAndAdam:
    def test_loss_hand_example(self):
        assert photometric_loss(np.ones((1, 3)), np.zeros((1, 3))).item() == pytest.approx(3.0)

    def test_loss_averages_over_rays(self):
        pred = np.array([[1.0, 0, 0], [0, 0, 0]])
        assert photometric_loss(pred, np.zeros((2, 3))).item() == pytest.approx(0.5)

    def test_loss_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            photometric_loss(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_adam_first_step(self):
        with ad.precision(np.float64):
            p = ad.Tensor(np.array([0.5]), requires_grad=True)
            state = OptimState([np.zeros(1)], [np.zeros(1)])
            adam_step([p], [np.ones(1)], state, 1e-3, eps=1e-8)
        assert 0.5 - p.data[0] == pytest.approx(9.99999990e-4, rel=1e-9)

    def test_adam_skips_missing_grads(self):
        a = ad.Tensor(np.ones(2), requires_grad=True)
        b = ad.Tensor(np.ones(2), requires_grad=True)
        opt = Adam([([a], 0.1), ([b], 0.1)])
        a.grad = np.ones(2, dtype=np.float32)
        opt.step()
        assert (a.data < 1).all() and (b.data == 1).all()

    def test_adam_descends_quadratic(self):
        x = ad.Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([([x], 0.1)])
        for _ in range(300):
            opt.zero_grad()
            ad.backward(ad.sum_reduce(ad.square(x)))
            opt.step()
        assert np.abs(x.data).max() < 1e-2

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(rays_per_batch=0),
                                    dict(mode="joint")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestBackground:
    def test_one_epoch_decreases_loss(self, dataset):
        fc = field_config_for(dataset.scene_box)
        rays = collect_rays(dataset.background, dataset.scene_box)
        before = dataset_loss(FieldBundle(bg=new_field(fc, 0, "bg")), rays)
        result = train_background(dataset, config(), fc)
        assert dataset_loss(result.bundle, rays) < before
        assert result.history[-1].epoch == 1 and result.steps == 4

    def test_single_colour_converges(self):
        target = np.array([0.2, 0.6, 0.3], dtype=np.float32)
        frames = []
        for i, pos in enumerate([(0.0, 0.0, 3.0), (0.1, 0.0, 3.0)]):
            frames.append(CameraFrame(look_at(pos, up=(0, 1, 0)), 0.3, 16, 16,
                                      image=np.tile(target, (16, 16, 1)), name=f"f{i}"))
        ds = Dataset(frames, [], 0.3, BOX)
        result = train_background(ds, config(epochs=250, rays_per_batch=256), field_config_for(BOX))
        rays = collect_rays(frames, BOX)
        assert result.steps <= 500
        assert dataset_loss(result.bundle, rays) < 1e-4

    def test_same_seed_same_weights(self, dataset):
        fc = field_config_for(dataset.scene_box)
        a = train_background(dataset, config(seed=3), fc).bundle.bg.digest()
        b = train_background(dataset, config(seed=3), fc).bundle.bg.digest()
        c = train_background(dataset, config(seed=4), fc).bundle.bg.digest()
        assert a == b != c

    def test_epoch_hook_and_history(self, dataset, tmp_path):
        calls = []

        def hook(epoch, bundle):
            calls.append(epoch)
            return {"probe": float(epoch)}

        result = train_background(dataset, config(epochs=2, checkpoint_every=1),
                                  field_config_for(dataset.scene_box), hook, tmp_path)
        assert calls == [0, 1, 2]
        assert (tmp_path / "epoch_0001" / "bundle.json").exists()
        assert (tmp_path / "epoch_0002" / "bundle.json").exists()
        write_history(tmp_path / "h.csv", result.history)
        rows = list(csv.DictReader(open(tmp_path / "h.csv")))
        assert [r["epoch"] for r in rows] == ["0", "1", "2"] and rows[2]["probe"] == "2"

    def test_missing_images_rejected(self):
        with pytest.raises(ValueError):
            collect_rays([CameraFrame(np.eye(4), 0.5, 4, 4)], BOX)

    def test_empty_split_rejected(self, dataset):
        with pytest.raises(ValueError):
            train_background(Dataset([], dataset.eval, 0.5, BOX), config())


@pytest.fixture(scope="module")
def background(dataset):
    return train_background(dataset, config(), field_config_for(dataset.scene_box)).bundle.bg


class TestResidual:
    def test_background_frozen(self, dataset, background):
        before = background.digest()
        result = train_residual(dataset, background, config(epochs=2),
                                mix_config=mix_config_for(dataset.scene_box))
        assert background.digest() == before
        assert all(p.grad is None and not p.requires_grad for p in background.params().values())
        assert result.bundle.mix is not None and result.bundle.res is not None

    def test_residual_reduces_eval_loss(self, dataset, background):
        rays = collect_rays(dataset.eval, dataset.scene_box)
        result = train_residual(dataset, background, config(epochs=2),
                                mix_config=mix_config_for(dataset.scene_box))
        assert dataset_loss(result.bundle, rays, "residual") < dataset_loss(
            FieldBundle(bg=background), rays)

    def test_naive_mode_has_no_mix(self, dataset, background):
        result = train_residual(dataset, background, config(mode="naive_residual"))
        assert result.bundle.mix is None
        assert result.history[-1].train_loss > 0

    def test_requires_background(self, dataset):
        with pytest.raises(ValueError):
            train_residual(dataset, None, config())

    def test_scratch_trains_on_eval_split(self, dataset):
        fc = field_config_for(dataset.scene_box)
        result = train_scratch(dataset, config(), fc)
        assert result.bundle.res is None
        assert result.steps == int(np.ceil(len(collect_rays(dataset.eval, dataset.scene_box)) / 128))
