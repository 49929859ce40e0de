import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sketch2face.errors import ShapeError
from sketch2face.imaging import (SIGNED, UNIT, check_image, check_range, convert_range, load_png,
                                 save_png, to_gray)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_range_roundtrip(seed):
    x = torch.rand(3, 5, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    s = convert_range(x, UNIT, SIGNED)
    assert check_range(s, SIGNED)
    torch.testing.assert_close(convert_range(s, SIGNED, UNIT), x, rtol=0, atol=1e-15)
    assert torch.equal(convert_range(x, UNIT, UNIT), x)


def test_to_gray_weights():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 1.0, 0.5, 0.25
    assert to_gray(rgb) == pytest.approx(np.full((2, 2), 0.299 + 0.5 * 0.587 + 0.25 * 0.114))
    g = np.random.default_rng(0).random((4, 4))
    assert np.array_equal(to_gray(g), g)


def test_check_image_rejects_degenerate():
    with pytest.raises(ShapeError):
        check_image(torch.zeros(3, 0, 4))
    with pytest.raises(ShapeError):
        check_image(torch.zeros(2, 4, 4))


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = torch.tensor(rng.integers(0, 256, (3, 9, 11)) / 255.0)
    save_png(tmp_path / "a.png", img, UNIT)
    back = load_png(tmp_path / "a.png")
    assert back.shape == (9, 11, 3)
    np.testing.assert_allclose(back, img.permute(1, 2, 0).numpy(), atol=1e-12)
    gray = torch.tensor(rng.integers(0, 256, (1, 6, 6)) / 255.0)
    save_png(tmp_path / "g.png", gray, UNIT)
    assert load_png(tmp_path / "g.png").shape == (6, 6)
    assert load_png(tmp_path / "g.png", channels=3).shape == (6, 6, 3)
