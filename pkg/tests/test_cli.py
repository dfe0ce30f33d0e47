import numpy as np
import pytest

from cnnforge import __version__
from cnnforge.cli import main, read_config
from cnnforge.errors import InputError
from cnnforge.imaging import GrayImage, bicubic_resize, read_pgm, write_pgm
from cnnforge.synth import SynthConfig, generate_synth
from cnnforge.templates import TemplateLibrary, builtin_oracles, save_library


@pytest.mark.parametrize("args, out", [
    (["100", "65"], "PR class1"),
    (["100", "130"], "PD class2"),
    (["50", "0", "--disappeared"], "CR class1"),
])
def test_recist(capsys, args, out):
    base, follow, *rest = args
    assert main(["recist", "--baseline-mm", base, "--followup-mm", follow, *rest]) == 0
    assert capsys.readouterr().out.strip() == out


def test_recist_inconsistent_is_contract_error(capsys):
    assert main(["recist", "--baseline-mm", "50", "--followup-mm", "5", "--disappeared"]) == 3


@pytest.fixture
def image(tmp_path):
    rng = np.random.default_rng(0)
    write_pgm(GrayImage(rng.integers(0, 256, (40, 40))), tmp_path / "roi.pgm")
    return tmp_path / "roi.pgm"


def test_simulate_previews(tmp_path, image):
    lib = TemplateLibrary([t for t in builtin_oracles(12.0) if t.name in ("zero", "identity_pass")])
    save_library(lib, tmp_path / "lib.txt")
    rc = main(["simulate", "--templates", str(tmp_path / "lib.txt"), "--image", str(image),
               "--out", str(tmp_path / "out"), "--grid", "16x16"])
    assert rc == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == [
        "identity_pass.cnnf", "identity_pass.pgm", "run.cfg", "zero.cnnf", "zero.pgm"]
    # a decayed field renders as mid-gray under v -> round((v + 1) * 127.5)
    assert set(np.unique(read_pgm(out / "zero.pgm").pixels)) <= {127, 128}
    resized = bicubic_resize(read_pgm(image), 16, 16).pixels.astype(int)
    assert np.abs(read_pgm(out / "identity_pass.pgm").pixels.astype(int) - resized).max() <= 1
    cfg = (out / "run.cfg").read_text()
    assert cfg.startswith(f"# cnnforge {__version__}\ncommand = simulate\n")
    assert "grid = 16x16" in cfg


def test_missing_file_exit_2(tmp_path, capsys, image):
    rc = main(["simulate", "--templates", str(tmp_path / "none.txt"), "--image", str(image), "--out", str(tmp_path)])
    assert rc == 2
    assert "none.txt" in capsys.readouterr().err


def test_config_file_and_override(tmp_path, image):
    save_library(builtin_oracles(1.0), tmp_path / "lib.txt")
    (tmp_path / "run.conf").write_text("# settings\ngrid = 12x12\ndt = 0.1\n")
    rc = main(["simulate", "--config", str(tmp_path / "run.conf"), "--templates", str(tmp_path / "lib.txt"),
               "--image", str(image), "--out", str(tmp_path / "o"), "--dt", "0.05"])
    assert rc == 0
    assert read_pgm(tmp_path / "o" / "zero.pgm").pixels.shape == (12, 12)
    text = (tmp_path / "o" / "run.cfg").read_text()
    assert "dt = 0.05" in text and "grid = 12x12" in text


def test_unknown_config_key(tmp_path):
    (tmp_path / "bad.conf").write_text("gird = 8x8\n")
    with pytest.raises(InputError, match="unknown config key 'gird'"):
        read_config(tmp_path / "bad.conf")


def test_augment_empty_manifest(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("patient_id,lesion_id,image_path,body_site,ld_mm,label,split\n")
    save_library(builtin_oracles(), tmp_path / "lib.txt")
    rc = main(["augment", "--manifest", str(tmp_path / "m.csv"), "--templates", str(tmp_path / "lib.txt"),
               "--out", str(tmp_path / "f")])
    assert rc == 0
    assert "train,total,0" in capsys.readouterr().out
    assert (tmp_path / "f" / "run.cfg").exists()


def test_search_target_zero(tmp_path):
    generate_synth(SynthConfig.per_class(2, 1), tmp_path / "d")
    rc = main(["search", "--manifest", str(tmp_path / "d" / "manifest.csv"), "--out", str(tmp_path / "s"),
               "--target-count", "0"])
    assert rc == 3


def test_predict_empty_feature_dir(tmp_path):
    (tmp_path / "feats").mkdir()
    generate_synth(SynthConfig.per_class(1, 1), tmp_path / "d")
    rc = main(["predict", "--model", str(tmp_path / "m.npz"), "--features", str(tmp_path / "feats"),
               "--manifest", str(tmp_path / "d" / "manifest.csv"), "--out", str(tmp_path / "p.csv")])
    assert rc == 2


def test_evaluate_perfect_predictions(tmp_path, capsys):
    lines = ["patient_id,lesion_id,template_name,p_class1,label"]
    man = ["patient_id,lesion_id,image_path,body_site,ld_mm,label,split"]
    for i in range(30):
        label = "class1" if i < 15 else "class2"
        man.append(f"P{i},L{i},x.pgm,other,30.0,{label},test")
        for t in range(3):
            lines.append(f"P{i},L{i},t{t},{0.9 if label == 'class1' else 0.1},{label}")
    (tmp_path / "p.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "m.csv").write_text("\n".join(man) + "\n")
    assert main(["evaluate", "--predictions", str(tmp_path / "p.csv"), "--manifest", str(tmp_path / "m.csv"),
                 "--out", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert "Accuracy:    100.00" in out and "Sensitivity: 100.00" in out and "Specificity: 100.00" in out
    assert (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1] == "15,0,0,15,100.00,100.00,100.00"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """Tiny full pipeline: 4+4 training lesions, 2+2 test lesions, 2 templates, 16x16 grid."""
    root = tmp_path_factory.mktemp("pipe")
    generate_synth(SynthConfig.per_class(4, 2, image_size=32), root / "d")
    man = str(root / "d" / "manifest.csv")
    common = ["--grid", "16x16"]
    steps = [
        ["search", "--manifest", man, "--out", str(root / "s"), "--target-count", "2", "--max-proposals", "20",
         "--search-epochs", "10", "--seed", "1", "--eval-subset", "1.0", "--val-fraction", "0.25", *common],
        ["augment", "--manifest", man, "--templates", str(root / "s" / "templates.txt"),
         "--out", str(root / "f"), "--threads", "2", *common],
        ["train", "--features", str(root / "f"), "--manifest", man, "--out", str(root / "m"),
         "--epochs", "5", "--seed", "1", "--val-fraction", "0.25"],
        ["predict", "--model", str(root / "m"), "--features", str(root / "f"), "--manifest", man,
         "--out", str(root / "p.csv")],
        ["evaluate", "--predictions", str(root / "p.csv"), "--manifest", man, "--out", str(root / "e")],
    ]
    codes = [main(s) for s in steps]
    return root, steps, codes


def test_small_pipeline_runs(small_run):
    root, _, codes = small_run
    assert codes == [0] * 5
    header = (root / "p.csv").read_text().splitlines()[0]
    assert header == "patient_id,lesion_id,template_name,p_class1,label"
    for d in ("s", "f", "m"):
        assert (root / d / "run.cfg").exists()


def test_small_pipeline_is_byte_identical_on_rerun(small_run, tmp_path):
    root, steps, _ = small_run
    snapshot = {p: p.read_bytes() for p in root.rglob("*") if p.is_file()}
    assert [main(s) for s in steps] == [0] * 5
    assert {p: p.read_bytes() for p in root.rglob("*") if p.is_file()} == snapshot


def test_predict_dimension_mismatch(small_run, tmp_path):
    root, steps, _ = small_run
    man = str(root / "d" / "manifest.csv")
    assert main(["augment", "--manifest", man, "--templates", str(root / "s" / "templates.txt"),
                 "--out", str(tmp_path / "f"), "--grid", "12x12"]) == 0
    rc = main(["predict", "--model", str(root / "m"), "--features", str(tmp_path / "f"), "--manifest", man,
               "--out", str(tmp_path / "p.csv")])
    assert rc == 3
