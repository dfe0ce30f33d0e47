import numpy as np
import pytest

from cnnforge.errors import ContractError
from cnnforge.imaging import read_manifest, read_pgm, resolve_image, split_counts
from cnnforge.synth import SynthConfig, brightness_baseline, generate_synth


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    recs = generate_synth(SynthConfig(), out)
    return out, recs


def test_default_split_shape(corpus):
    out, recs = corpus
    assert split_counts(recs) == {"train": 76, "val": 0, "test": 30}
    train = [r.label for r in recs if r.split == "train"]
    assert (train.count("class1"), train.count("class2")) == (28, 48)
    assert read_manifest(out / "manifest.csv") == recs


def test_images_are_mean_matched(corpus):
    out, recs = corpus
    for r in recs:
        img = read_pgm(resolve_image(r, out / "manifest.csv"))
        assert img.pixels.shape == (128, 128)
        assert 126 <= img.pixels.mean() <= 130


def test_brightness_alone_does_not_separate(corpus):
    out, recs = corpus
    load = lambda split: [(read_pgm(resolve_image(r, out / "manifest.csv")), r.label)
                          for r in recs if r.split == split]
    assert brightness_baseline(load("train"), load("test")) <= 0.60


def test_fixed_seed_is_byte_identical(tmp_path):
    cfg = SynthConfig.per_class(2, 1, rng_seed=9)
    generate_synth(cfg, tmp_path / "a")
    generate_synth(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 7
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


def test_one_per_class(tmp_path):
    recs = generate_synth(SynthConfig.per_class(1, 1), tmp_path)
    assert split_counts(recs)["train"] == 2


def test_classes_differ_in_structure(tmp_path):
    recs = generate_synth(SynthConfig.per_class(4, 1, noise_sigma=0.0), tmp_path)
    center = {"class1": [], "class2": []}
    for r in recs:
        px = read_pgm(resolve_image(r, tmp_path / "manifest.csv")).pixels.astype(float)
        center[r.label].append(px[54:74, 54:74].mean() - px.mean())
    # blobs peak at the center, rings are hollow there
    assert min(center["class1"]) > max(center["class2"])


def test_counts_validated():
    with pytest.raises(ContractError):
        SynthConfig.per_class(0, 1)
