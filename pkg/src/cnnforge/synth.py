"""Seeded blob-vs-ring lesion corpus standing in for the clinical cohort.

Class 1 images carry a filled Gaussian blob, class 2 a ring. Every image is
shifted to a mean intensity of 128 so only structure separates the classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cnnforge.errors import ContractError, InputError
from cnnforge.imaging import BODY_SITES, GrayImage, LesionRecord, write_manifest, write_pgm

TARGET_MEAN = 128.0
MEAN_TOLERANCE = 2.0


@dataclass(frozen=True)
class SynthConfig:
    # 28 class-1 / 48 class-2 training lesions, 15 / 15 test lesions
    n_train_class1: int = 28
    n_train_class2: int = 48
    n_test_class1: int = 15
    n_test_class2: int = 15
    image_size: int = 128
    rng_seed: int = 0
    blob_sigma: tuple = (8.0, 16.0)
    ring_radius: tuple = (18.0, 32.0)
    ring_thickness: tuple = (5.0, 10.0)
    peak: tuple = (90.0, 140.0)
    center_jitter: float = 10.0
    noise_sigma: float = 6.0

    def __post_init__(self):
        counts = (self.n_train_class1, self.n_train_class2, self.n_test_class1, self.n_test_class2)
        if min(counts) < 1:
            raise ContractError("every class/split count must be >= 1")
        if self.image_size < 16:
            raise ContractError("image_size must be >= 16")

    @classmethod
    def per_class(cls, n_train, n_test, **kw):
        return cls(n_train, n_train, n_test, n_test, **kw)


def _shape(kind, rng, cfg):
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cx, cy = (n - 1) / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2)
    r = np.hypot(xx - cx, yy - cy)
    if kind == "class1":
        sigma = rng.uniform(*cfg.blob_sigma)
        return np.exp(-0.5 * (r / sigma) ** 2)
    radius = rng.uniform(*cfg.ring_radius)
    half = rng.uniform(*cfg.ring_thickness) / 2
    return np.exp(-0.5 * ((r - radius) / half) ** 2)


def _mean_matched(raw):
    """Shift, round and clip to 8 bits so the mean lands on TARGET_MEAN."""
    shift = TARGET_MEAN - raw.mean()
    for _ in range(8):
        px = np.clip(np.floor(raw + shift + 0.5), 0, 255)
        err = TARGET_MEAN - px.mean()
        if abs(err) < 0.05:
            break
        shift += err
    return px.astype(np.uint8)


def render_lesion(kind, rng, cfg):
    pattern = _shape(kind, rng, cfg) * rng.uniform(*cfg.peak)
    noisy = pattern + rng.normal(0.0, cfg.noise_sigma, pattern.shape)
    return GrayImage(_mean_matched(noisy))


def generate_synth(cfg, out_dir):
    """Write PGMs under ``out_dir/images`` and ``out_dir/manifest.csv``; return the records."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out_dir}: {exc.strerror}") from exc
    rng = np.random.default_rng(cfg.rng_seed)
    plan = (
        [("train", "class1")] * cfg.n_train_class1
        + [("train", "class2")] * cfg.n_train_class2
        + [("test", "class1")] * cfg.n_test_class1
        + [("test", "class2")] * cfg.n_test_class2
    )
    records = []
    for n, (split, label) in enumerate(plan, start=1):
        img = render_lesion(label, rng, cfg)
        site = BODY_SITES[int(rng.integers(len(BODY_SITES)))]
        ld_mm = round(float(rng.uniform(20.0, 60.0)), 1)
        rel = f"images/L{n:04d}.pgm"
        try:
            write_pgm(img, out_dir / rel)
        except OSError as exc:
            raise InputError(f"cannot write {out_dir / rel}: {exc.strerror}") from exc
        records.append(LesionRecord(f"P{n:04d}", f"L{n:04d}", rel, site, ld_mm, label, split))
    write_manifest(records, out_dir / "manifest.csv")
    return records


def brightness_baseline(train, test):
    """Test accuracy of the best mean-intensity threshold fitted on ``train``.

    ``train`` and ``test`` are ``[(GrayImage, label), ...]``. Both threshold
    directions are tried; ties go to the first found.
    """
    means = np.array([img.pixels.mean() for img, _ in train])
    labels = np.array([lab == "class1" for _, lab in train])
    best = (-1.0, 0.0, True)
    for thr in np.unique(means):
        for above in (True, False):
            pred = means >= thr if above else means < thr
            acc = float(np.mean(pred == labels))
            if acc > best[0]:
                best = (acc, thr, above)
    _, thr, above = best
    tmeans = np.array([img.pixels.mean() for img, _ in test])
    tlabels = np.array([lab == "class1" for _, lab in test])
    pred = tmeans >= thr if above else tmeans < thr
    return float(np.mean(pred == tlabels))
