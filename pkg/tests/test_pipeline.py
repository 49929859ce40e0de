import csv
import json
import logging

import numpy as np
import pytest
import torch

from sketch2face.config import Config, apply_overrides, config_from_dict, load_config
from sketch2face.errors import ConfigError, DatasetError
from sketch2face.imaging import save_png
from sketch2face.inversion import Bundle, InversionConfig, LossTermSpec, appearance
from sketch2face.pipeline import (RunManifest, load_corpus, loss_combos, run_ablation,
                                  split_corpus)


def make_corpus(root, n_pairs, extra_photos=0, extra_sketches=0):
    rng = np.random.default_rng(0)
    for i in range(n_pairs + extra_photos):
        save_png(root / "photos" / f"p{i:03d}.png", rng.random((8, 8, 3)))
    for i in range(n_pairs):
        save_png(root / "sketches" / f"p{i:03d}.png", rng.random((8, 8)))
    for i in range(extra_sketches):
        save_png(root / "sketches" / f"orphan{i}.png", rng.random((8, 8)))
    return root


@pytest.fixture(scope="module")
def corpus123(tmp_path_factory):
    return load_corpus(make_corpus(tmp_path_factory.mktemp("cufs"), 123))


def test_load_corpus_123(corpus123):
    assert len(corpus123) == 123 and not corpus123.orphans
    assert all(r.photo.exists() and r.sketch.exists() for r in corpus123.records)
    assert len({r.identity for r in corpus123.records}) == 123


def test_split_40_83(corpus123):
    c = split_corpus(corpus123, 40, seed=0)
    train, test = {r.identity for r in c.train}, {r.identity for r in c.test}
    assert len(train) == 40 and len(test) == 83
    assert train | test == {r.identity for r in corpus123.records} and not train & test
    again = split_corpus(corpus123, 40, seed=0)
    assert again.split == c.split
    assert split_corpus(corpus123, 40, seed=1).split != c.split


@pytest.mark.parametrize("n", [0, 123, 200])
def test_split_out_of_range(corpus123, n):
    with pytest.raises(DatasetError):
        split_corpus(corpus123, n, seed=0)


def test_orphans_reported(tmp_path, caplog):
    make_corpus(tmp_path, 2, extra_photos=1)
    with caplog.at_level(logging.WARNING):
        c = load_corpus(tmp_path)
    assert len(c) == 2 and len(c.orphans) == 1
    assert "orphan" in caplog.text


def test_empty_corpus(tmp_path):
    with pytest.raises(DatasetError):
        load_corpus(tmp_path)
    make_corpus(tmp_path, 0, extra_photos=2)
    with pytest.raises(DatasetError, match="orphans"):
        load_corpus(tmp_path)


def test_loss_combos_d_to_j():
    combos = loss_combos("a", "b", "c")
    assert list(combos) == list("defghij")
    names = {k: [t.name for t in v] for k, v in combos.items()}
    assert names["d"] == ["app:a"] and names["e"] == ["app:b"]
    assert names["f"] == ["app:a", "app:b", "app:c"]
    assert names["g"] == ["app:a", "manifold"] and names["h"] == ["app:b", "manifold"]
    assert names["i"] == ["app:a", "app:b", "manifold"]
    assert names["j"] == ["app:a", "app:b", "app:c", "manifold"]


@pytest.fixture(scope="module")
def sketches(toy_target):
    return [("s0", toy_target[1])]


def test_ablation_grid(multi_bundle, sketches, tmp_path):
    cfg = InversionConfig(max_iterations=5, optimize_rows="shared_1")
    report = run_ablation(sketches, multi_bundle, loss_combos("toy", "toy_b", "toy_c"), cfg)
    assert report.combos == list("defghij") and len(report.cells) == 7
    assert all(c.status == "ok" for c in report.cells)
    report.write(tmp_path / "abl")
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv")))
    assert [r["combo"] for r in rows] == list("defghij")
    assert (tmp_path / "abl" / "s0" / "j" / "final.png").exists()


def test_ablation_two_combos(multi_bundle, sketches):
    combos = {k: v for k, v in loss_combos("toy", "toy_b", "toy_c").items() if k in "dg"}
    report = run_ablation(sketches, multi_bundle, combos, InversionConfig(max_iterations=3))
    assert len(report.cells) == 2


def test_ablation_cell_isolation(multi_bundle, sketches):
    cfg = InversionConfig(max_iterations=8)
    good = {"d": appearance("toy")}
    alone = run_ablation(sketches, multi_bundle, good, cfg)
    mixed = run_ablation(sketches, multi_bundle, {"x": appearance("vggface"), **good}, cfg)
    assert mixed.cell("s0", "x").status == "failed" and "vggface" in mixed.cell("s0", "x").error
    assert mixed.cell("s0", "d").status == "ok"
    assert mixed.cell("s0", "d").run.total_losses == alone.cell("s0", "d").run.total_losses
    with pytest.raises(DatasetError):
        run_ablation(sketches, multi_bundle, {}, cfg)


def test_run_manifest(tmp_path):
    m = RunManifest("invert", {"a": 1}, {"generator": "toy"}, {"inversion": 0}, argv=["invert"])
    rec = json.loads(m.write(tmp_path / "m.json").read_text())
    assert rec["stage"] == "invert" and rec["seeds"] == {"inversion": 0} and rec["argv"] == ["invert"]
    assert rec["timestamps"]["finished"] >= rec["timestamps"]["started"]


# -- config ---------------------------------------------------------------------

def test_config_defaults_and_roundtrip(tmp_path):
    cfg = Config()
    assert cfg.f2w.dataset_size == 1000 and cfg.hogfd.dataset_size == 100_000
    assert cfg.paths.init_extractor == "vggface"
    cfg.dump(tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict() and back.base_dir == tmp_path.resolve()


def test_config_overrides():
    cfg = apply_overrides(Config(), ["inversion.step_size=0.05", "hogfd.input_resolution=64",
                                     "inversion.terms=[app:toy, manifold*2]"])
    assert cfg.inversion.step_size == 0.05 and cfg.hogfd.input_resolution == 64
    assert cfg.inversion.terms == [LossTermSpec("appearance", "toy"), LossTermSpec("manifold", None, 2.0)]
    for bad in (["nonsense"], ["f2w.nokey=1"], ["zzz.a=1"]):
        with pytest.raises(ConfigError):
            apply_overrides(Config(), bad)


def test_config_rejects_unknown(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"extra": {}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("paths: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_config_resolves_relative_paths(tmp_path):
    (tmp_path / "c.yaml").write_text("paths:\n  generator: g.safetensors\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.resolve(cfg.paths.generator) == tmp_path.resolve() / "g.safetensors"
