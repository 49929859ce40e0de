import json
import subprocess
import sys

import pytest

from sketch2face.cli import main


def _cfg(assets):
    return ["--config", str(assets / "config.yaml")]


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "invalid choice" in err


def test_unknown_subcommand_process_exit():
    proc = subprocess.run([sys.executable, "-m", "sketch2face.cli", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode != 0 and "usage:" in proc.stderr


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "make-toy-assets" in capsys.readouterr().out


def test_make_toy_assets_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["make-toy-assets", "--seed", "1234", "--out", str(a)]) == 0
    assert main(["make-toy-assets", "--seed", "1234", "--out", str(b)]) == 0
    for name in ("generator.safetensors", "generator.safetensors.manifest", "toy_extractor.safetensors",
                 "extractors.yaml", "config.yaml"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    manifest = json.loads((a / "run_manifest.json").read_text())
    assert manifest["stage"] == "make-toy-assets" and manifest["seeds"]["generator"] == 1234
    assert manifest["argv"][:3] == ["make-toy-assets", "--seed", "1234"]


def test_make_toy_assets_seed_changes_weights(tmp_path):
    main(["make-toy-assets", "--seed", "1", "--out", str(tmp_path / "a")])
    main(["make-toy-assets", "--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "generator.safetensors").read_bytes() != (tmp_path / "b" / "generator.safetensors").read_bytes()


@pytest.mark.slow
def test_trained_toy_models_byte_identical(toy_assets, tmp_path):
    assert main(["make-toy-assets", "--seed", "1234", "--out", str(tmp_path), "--with-models"]) == 0
    for name in ("f2w.safetensors", "hogfd.safetensors"):
        assert (tmp_path / name).read_bytes() == (toy_assets / name).read_bytes(), name


def test_invert(toy_assets, toy_sketch_png, tmp_path):
    out = tmp_path / "run"
    assert main(["invert", *_cfg(toy_assets), "--sketch", str(toy_sketch_png), "--out", str(out),
                 "--max-iterations", "40"]) == 0
    for name in ("final.png", "losses.csv", "config.json", "summary.json", "run_manifest.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] <= 40 and summary["final_total"] < summary["initial_total"]
    header = (out / "losses.csv").read_text().splitlines()[0]
    assert header == "iteration,total,app:toy,manifold"


def test_invert_errors(toy_assets, toy_sketch_png, tmp_path):
    base = ["invert", *_cfg(toy_assets), "--out", str(tmp_path / "x")]
    assert main([*base, "--sketch", str(tmp_path / "none.png")]) == 2
    assert main([*base, "--sketch", str(toy_sketch_png), "--mapper", str(tmp_path / "no.safetensors")]) == 2
    assert main([*base, "--sketch", str(toy_sketch_png), "--set", "inversion.bogus=1"]) == 1
    assert main([*base, "--sketch", str(toy_sketch_png), "--terms", "nonsense"]) == 1
    assert main(["invert", "--sketch", str(toy_sketch_png)]) == 1
    assert main(["invert", "--config", str(tmp_path / "absent.yaml"), "--sketch", str(toy_sketch_png),
                 "--out", str(tmp_path / "y")]) == 1


def test_stage_chain(toy_assets, toy_sketch_png, tmp_path):
    cfg = _cfg(toy_assets)
    assert main(["prepare-f2w-data", *cfg, "--out", str(tmp_path / "pairs"), "--n", "40", "--extractor", "toy"]) == 0
    assert (tmp_path / "pairs" / "run_manifest.json").exists()
    assert main(["train-f2w", *cfg, "--data", str(tmp_path / "pairs"), "--out", str(tmp_path / "m.safetensors"),
                 "--max-steps", "20"]) == 0
    ev = json.loads((tmp_path / "m.safetensors.eval.json").read_text())
    assert ev["records"] == 2
    assert main(["prepare-faceness-data", *cfg, "--out", str(tmp_path / "faces"), "--n", "24"]) == 0
    assert (tmp_path / "faces" / "scores.csv").read_text().startswith("index,seed,score")
    assert main(["train-hogfd", *cfg, "--data", str(tmp_path / "faces"), "--out", str(tmp_path / "h.safetensors"),
                 "--epochs", "2"]) == 0
    assert main(["invert", *cfg, "--sketch", str(toy_sketch_png), "--out", str(tmp_path / "inv"),
                 "--mapper", str(tmp_path / "m.safetensors"), "--hogfd", str(tmp_path / "h.safetensors"),
                 "--max-iterations", "5"]) == 0
    assert (tmp_path / "inv" / "final.png").exists()


def test_ablate_and_evaluate(toy_assets, toy_sketch_png, tmp_path):
    cfg = _cfg(toy_assets)
    code = main(["ablate", *cfg, "--sketch", str(toy_sketch_png), "--out", str(tmp_path / "abl"),
                 "--combos", "d", "g", "--l1", "toy", "--max-iterations", "4"])
    assert code == 0
    assert (tmp_path / "abl" / "ablation.csv").read_text().count("\n") == 3
    ref, syn = tmp_path / "ref", tmp_path / "syn"
    ref.mkdir(), syn.mkdir()
    (ref / "s.png").write_bytes(toy_sketch_png.read_bytes())
    (ref / "t.png").write_bytes((tmp_path / "abl" / "s" / "g" / "final.png").read_bytes())
    (syn / "s.png").write_bytes((tmp_path / "abl" / "s" / "d" / "final.png").read_bytes())
    (syn / "t.png").write_bytes((tmp_path / "abl" / "s" / "g" / "final.png").read_bytes())
    assert main(["evaluate", *cfg, "--reference-dir", str(ref), "--synth-dir", str(syn),
                 "--out", str(tmp_path / "ev"), "--recognizers", "toy,vggface"]) == 0
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert summary["pairs"] == 2 and summary["rank1"]["vggface"] is None
    assert 0 <= summary["rank1"]["toy"] <= 1
    md = (tmp_path / "ev" / "summary.md").read_text()
    assert "| SSIM | FSIM | VIF |" in md and "n/a" in md
    assert summary["iqa_means"]["ssim"] < 1 and summary["iqa_means"]["vif"] is None
    assert (tmp_path / "ev" / "iqa.csv").exists() and (tmp_path / "ev" / "rank1_toy.csv").exists()


def test_ablate_corpus_split(toy_assets, tmp_path):
    from test_pipeline import make_corpus

    make_corpus(tmp_path / "c", 5)
    code = main(["ablate", *_cfg(toy_assets), "--corpus", str(tmp_path / "c"), "--n-train", "3",
                 "--combos", "d", "--l1", "toy", "--max-iterations", "2", "--out", str(tmp_path / "abl")])
    assert code == 0
    rows = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert len(rows) == 1 + 2
    assert json.loads((tmp_path / "abl" / "run_manifest.json").read_text())["seeds"]["split"] == 0


def test_ablate_failing_cell_exit_code(toy_assets, toy_sketch_png, tmp_path):
    code = main(["ablate", *_cfg(toy_assets), "--sketch", str(toy_sketch_png), "--out", str(tmp_path / "abl"),
                 "--combos", "d", "e", "--l1", "toy", "--l2", "vggface2", "--max-iterations", "2"])
    assert code == 2
    text = (tmp_path / "abl" / "ablation.csv").read_text()
    assert ",d,ok," in text and ",e,failed," in text
