import pytest
import torch

from sketch2face.extractors import default_registry
from sketch2face.f2w import F2WConfig, build_pair_dataset, train_mapper
from sketch2face.generator import make_toy_generator, sample_noise
from sketch2face.imaging import SIGNED, UNIT, convert_range
from sketch2face.inversion import Bundle
from sketch2face.manifold import HOGFDConfig, build_faceness_dataset, train_hogfd

F2W_EVAL_STEPS = (0, 20, 40, 80, 160, 320, 620, 1000)
TOY_F2W = F2WConfig(epochs=1000, max_steps=1000, hidden=128, seed=0)
TOY_HOGFD = HOGFDConfig(input_resolution=32, epochs=40, batch_size=32, lr=3e-3, seed=0,
                        oracle="smoothness")


@pytest.fixture(scope="session")
def gen():
    return make_toy_generator()


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture(scope="session")
def toy_ex(registry):
    return registry.get("toy")


@pytest.fixture(scope="session")
def pair_ds(gen, toy_ex):
    return build_pair_dataset(gen, toy_ex, 1000, seed=0)


@pytest.fixture(scope="session")
def pair_split(pair_ds):
    return pair_ds.split(0.05)


@pytest.fixture(scope="session")
def mapper(pair_split):
    train, holdout = pair_split
    return train_mapper(train, TOY_F2W, holdout=holdout, eval_steps=F2W_EVAL_STEPS)


@pytest.fixture(scope="session")
def faceness_ds(gen):
    return build_faceness_dataset(gen, 256, 10**6, "smoothness")


@pytest.fixture(scope="session")
def hogfd(faceness_ds):
    return train_hogfd(faceness_ds, TOY_HOGFD)


@pytest.fixture(scope="session")
def bundle(gen, registry, mapper, hogfd):
    return Bundle(gen, registry, mapper, hogfd)


@pytest.fixture(scope="session")
def toy_target(gen):
    """A generated photo used as a sketch surrogate, plus its latent."""
    w_star = gen.map_noise(sample_noise(5000))
    with torch.no_grad():
        photo = gen.synthesize(w_star)
    return w_star, convert_range(photo, SIGNED, UNIT)


def three_toy_registry():
    """Default registry plus two extra toy extractors with different seeds (toy_b, toy_c)."""
    from dataclasses import replace

    from sketch2face.extractors import Extractor, init_toy_extractor

    reg = default_registry()
    base = reg.spec("toy")
    for eid, seed in (("toy_b", 11), ("toy_c", 12)):
        reg.add(Extractor(replace(base, extractor_id=eid), init_toy_extractor(seed)))
    return reg


@pytest.fixture(scope="session")
def multi_bundle(gen, mapper, hogfd):
    return Bundle(gen, three_toy_registry(), mapper, hogfd)


@pytest.fixture(scope="session")
def toy_assets(tmp_path_factory):
    """Directory produced by ``sketch2face make-toy-assets --with-models``."""
    from sketch2face.cli import main

    out = tmp_path_factory.mktemp("toy_assets")
    assert main(["make-toy-assets", "--seed", "1234", "--out", str(out), "--with-models"]) == 0
    return out


@pytest.fixture(scope="session")
def toy_sketch_png(gen, tmp_path_factory):
    """A toy-generated image written as a single-channel 8-bit PNG."""
    from sketch2face.imaging import save_png, to_gray, tensor_to_hwc

    with torch.no_grad():
        img = gen.synthesize(gen.map_noise(sample_noise(4242)))
    path = tmp_path_factory.mktemp("sketch") / "s.png"
    save_png(path, to_gray(tensor_to_hwc(img, SIGNED)), UNIT)
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
