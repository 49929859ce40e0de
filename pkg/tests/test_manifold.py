from dataclasses import replace

import numpy as np
import pytest
import torch
from PIL import Image

from helpers import autograd_grad, central_diff_grad, rel_err
from sketch2face.errors import DatasetError
from sketch2face.generator import sample_noise
from sketch2face.imaging import SIGNED, UNIT, convert_range
from sketch2face.manifold import (HOGFDConfig, HOGFDModel, HOGFDNet, ScoredImageDataset,
                                  build_faceness_dataset, hog_faceness, hogfd_score, manifold_loss,
                                  smoothness_faceness, train_hogfd)

from conftest import TOY_HOGFD

skimage_data = pytest.importorskip("skimage.data")


@pytest.fixture(scope="module")
def face():
    crop = skimage_data.astronaut()[0:256, 100:356] / 255.0
    return torch.tensor(crop).permute(2, 0, 1).contiguous()


def test_hog_black_image_scores_zero():
    assert hog_faceness(torch.zeros(3, 256, 256, dtype=torch.float64)) == 0.0


def test_hog_real_face_beats_degraded(face):
    clean = hog_faceness(face)
    noisy = (face + 0.1 * torch.randn(face.shape, dtype=torch.float64,
                                      generator=torch.Generator().manual_seed(0))).clamp(0, 1)
    assert clean > 0.5
    assert hog_faceness(noisy) < clean
    assert hog_faceness(face) == clean


def test_hog_invariant_to_reencoding(face, tmp_path):
    arr = np.round(face.permute(1, 2, 0).numpy() * 255).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "f.png")
    back = np.asarray(Image.open(tmp_path / "f.png")) / 255.0
    assert hog_faceness(back) == hog_faceness(arr / 255.0)


def test_smoothness_oracle_bounds():
    assert smoothness_faceness(torch.full((3, 8, 8), 0.3)) == pytest.approx(2.0)
    rough = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert 0 < smoothness_faceness(rough) < 2.0


def test_faceness_dataset(gen):
    a = build_faceness_dataset(gen, 10, 42, "smoothness")
    b = build_faceness_dataset(gen, 10, 42, "smoothness")
    assert len(a) == 10 and a.seeds == list(range(42, 52))
    assert torch.equal(a.images, b.images) and torch.equal(a.scores, b.scores)
    for img, s, seed in zip(a.images, a.scores, a.seeds):
        with torch.no_grad():
            fresh = convert_range(gen.synthesize(gen.map_noise(sample_noise(seed))), SIGNED, UNIT)
        fresh = torch.round(fresh.clamp(0, 1) * 255) / 255
        assert torch.equal(fresh, img)
        assert float(s) == smoothness_faceness(fresh)
        assert float(s) == smoothness_faceness(img)
    with pytest.raises(DatasetError):
        build_faceness_dataset(gen, 0, 0, "smoothness")


def test_faceness_dataset_save_load(gen, tmp_path):
    ds = build_faceness_dataset(gen, 4, 3, "smoothness")
    ds.save(tmp_path / "fd")
    header = (tmp_path / "fd" / "scores.csv").read_text().splitlines()[0]
    assert header == "index,seed,score"
    back = ScoredImageDataset.load(tmp_path / "fd")
    assert torch.equal(back.images, ds.images) and torch.equal(back.scores, ds.scores)
    assert back.seeds == ds.seeds and back.oracle == "smoothness"


def test_net_shape_contract():
    net = HOGFDNet(128).eval()
    assert net(torch.zeros(2, 3, 128, 128)).shape == (2,)
    with pytest.raises(ValueError):
        HOGFDNet(100)


def test_trained_beats_constant_predictor(hogfd):
    assert hogfd.final_mse < hogfd.target_variance
    assert all(np.isfinite(hogfd.loss_curve))


def test_max_score_is_model_maximum(hogfd, faceness_ds):
    out = hogfd_score(hogfd, faceness_ds.images)
    assert float(out.max()) <= hogfd.max_score + 1e-12
    assert float(hogfd_score(hogfd, faceness_ds.images[hogfd.argmax_index])) == hogfd.max_score
    assert manifold_loss(hogfd, faceness_ds.images[hogfd.argmax_index]).item() == 0.0


def test_manifold_loss_nonnegative_on_training_set(hogfd, faceness_ds):
    losses = [manifold_loss(hogfd, img).item() for img in faceness_ds.images]
    assert min(losses) == 0.0
    assert all(v >= 0 for v in losses)


def test_eq3_identity_on_random_images(hogfd):
    g = torch.Generator().manual_seed(9)
    for _ in range(20):
        img = torch.rand(3, 32, 32, dtype=torch.float64, generator=g)
        s = hogfd_score(hogfd, img)
        loss = manifold_loss(hogfd, img)
        assert loss.item() == hogfd.max_score - s.item()
        assert abs(loss.item() + s.item() - hogfd.max_score) <= 4 * np.finfo(float).eps * max(1, abs(hogfd.max_score))


def test_score_deterministic(hogfd, faceness_ds):
    img = faceness_ds.images[5]
    assert hogfd_score(hogfd, img).item() == hogfd_score(hogfd, img).item()


def test_score_gradient(hogfd, faceness_ds):
    img = faceness_ds.images[7].clone()
    assert rel_err(central_diff_grad(lambda x: hogfd_score(hogfd, x), img),
                   autograd_grad(lambda x: hogfd_score(hogfd, x), img)) < 1e-4


def test_negative_loss_above_max(hogfd, faceness_ds):
    img = faceness_ds.images[hogfd.argmax_index].clone()
    for _ in range(50):
        g = autograd_grad(lambda x: hogfd_score(hogfd, x), img)
        img = img + 0.01 * g / g.norm()
    assert manifold_loss(hogfd, img).item() < 0


def test_max_score_unset_raises(hogfd, faceness_ds):
    bare = HOGFDModel(hogfd.net, hogfd.input_resolution)
    with pytest.raises(ValueError):
        manifold_loss(bare, faceness_ds.images[0])


def test_constant_targets(faceness_ds):
    ds = replace(faceness_ds, scores=torch.full_like(faceness_ds.scores, 0.7))
    m = train_hogfd(ds, replace(TOY_HOGFD, epochs=5))
    out = hogfd_score(m, torch.cat([faceness_ds.images[:64],
                                    torch.rand(8, 3, 32, 32, dtype=torch.float64)]))
    assert (out - 0.7).abs().max() < 0.05


def test_memorize_ten_records(faceness_ds):
    ds = replace(faceness_ds, images=faceness_ds.images[:10], scores=faceness_ds.scores[:10],
                 seeds=faceness_ds.seeds[:10])
    m = train_hogfd(ds, replace(TOY_HOGFD, dropout=0.0, epochs=200, batch_size=10, lr=3e-3, seed=0))
    assert m.final_mse < 1e-3


def test_empty_dataset_rejected(faceness_ds):
    empty = replace(faceness_ds, images=faceness_ds.images[:0], scores=faceness_ds.scores[:0], seeds=[])
    with pytest.raises(DatasetError):
        train_hogfd(empty, TOY_HOGFD)


def test_save_load_preserves_scores(hogfd, faceness_ds, tmp_path):
    hogfd.save(tmp_path / "h.safetensors")
    back = HOGFDModel.load(tmp_path / "h.safetensors")
    assert back.max_score == hogfd.max_score and back.argmax_index == hogfd.argmax_index
    assert torch.equal(hogfd_score(back, faceness_ds.images[:8]), hogfd_score(hogfd, faceness_ds.images[:8]))


def test_default_config():
    cfg = HOGFDConfig()
    assert cfg.input_resolution == 128 and cfg.dropout == 0.5 and cfg.oracle == "hog"
