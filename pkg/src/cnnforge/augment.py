"""Feature generation: one transient run per (lesion ROI, template)."""

from __future__ import annotations

import shutil
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cnnforge.engine import IntegrationConfig, run_batch
from cnnforge.errors import ContractError, InputError
from cnnforge.imaging import (
    FeatureMap,
    SPLITS,
    bicubic_resize,
    normalize_to_cells,
    read_pgm,
    resolve_image,
    write_feature,
)

CHECKPOINT_POLICIES = ("final_only", "per_template_tfinal")
FEATURE_SUFFIX = ".cnnf"


@dataclass(frozen=True)
class AugmentConfig:
    """``t_final`` is an optional shared horizon.

    Under ``final_only`` it overrides every template's own horizon when set;
    ``per_template_tfinal`` always uses each template's ``t_final``.
    """

    grid_w: int = 64
    grid_h: int = 64
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    checkpoint_policy: str = "final_only"
    t_final: float | None = None
    threads: int = 1

    def __post_init__(self):
        if self.grid_w < 8 or self.grid_h < 8:
            raise ContractError(f"grid must be at least 8x8, got {self.grid_w}x{self.grid_h}")
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise ContractError(f"unknown checkpoint policy {self.checkpoint_policy!r}")
        if self.t_final is not None and not self.t_final > 0:
            raise ContractError("t_final must be positive")
        if self.threads < 1:
            raise ContractError("threads must be >= 1")

    def horizon(self, template):
        if self.checkpoint_policy == "final_only" and self.t_final is not None:
            return self.t_final
        return template.t_final


def prepare_input(img, cfg):
    """Resize an ROI onto the grid and map it to cell range."""
    return normalize_to_cells(bicubic_resize(img, cfg.grid_w, cfg.grid_h))


def template_features(fields, template, cfg, stop_on_divergence=False):
    """Outputs of one template over a stack of prepared inputs.

    Returns ``(values, diverged, horizon)``: ``values`` is float32 with the
    stack's shape; diverged elements are all-zero maps unless
    ``stop_on_divergence`` asks for a DivergenceError instead.
    """
    horizon = cfg.horizon(template)
    integ = replace(cfg.integration, checkpoint_times=(), record_states=False)
    mode = "raise" if stop_on_divergence else "mask"
    res = run_batch(fields, template, integ, t_final=horizon, on_divergence=mode)
    values = res.outputs[-1].astype(np.float32)
    values[res.diverged] = 0.0
    return values, res.diverged, horizon


def generate_features(roi, lib, cfg=None, lesion_id="roi"):
    """One FeatureMap per template, in library order. Divergent maps are zero and flagged."""
    cfg = cfg or AugmentConfig()
    u = prepare_input(roi, cfg)
    maps = []
    for t in lib:
        values, diverged, horizon = template_features(u, t, cfg)
        maps.append(FeatureMap(values, lesion_id, t.name, horizon, divergent=bool(diverged)))
    return maps


@dataclass
class AugmentSummary:
    counts: Counter = field(default_factory=Counter)  # (split, label) -> files
    divergent: list = field(default_factory=list)  # (lesion_id, template_name)

    @property
    def files(self):
        return sum(self.counts.values())

    def split_total(self, split):
        return sum(n for (s, _), n in self.counts.items() if s == split)

    def csv_lines(self):
        lines = ["split,class,count"]
        for split in SPLITS:
            labels = sorted(lab for s, lab in self.counts if s == split)
            for lab in labels:
                lines.append(f"{split},{lab},{self.counts[(split, lab)]}")
            if labels:
                lines.append(f"{split},total,{self.split_total(split)}")
        return lines


def feature_path(out_dir, split, lesion_id, template_name):
    return Path(out_dir) / split / lesion_id / f"{template_name}{FEATURE_SUFFIX}"


def load_inputs(records, manifest_path, cfg):
    fields = []
    for rec in records:
        path = resolve_image(rec, manifest_path)
        if not path.is_file():
            raise InputError(f"lesion {rec.lesion_id}: image not found: {path}")
        fields.append(prepare_input(read_pgm(path), cfg))
    return np.stack(fields) if fields else np.zeros((0, cfg.grid_h, cfg.grid_w))


def augment_dataset(records, lib, cfg, out_dir, manifest_path="."):
    """Write ``<out>/<split>/<lesion>/<template>.cnnf`` for every pair.

    On failure every directory this call created is removed again.
    """
    out_dir = Path(out_dir)
    summary = AugmentSummary()
    if not records or not len(lib):
        return summary
    fields = load_inputs(records, manifest_path, cfg)

    existed = out_dir.exists()
    created = []
    try:
        for rec in records:
            d = out_dir / rec.split / rec.lesion_id
            for parent in (out_dir, out_dir / rec.split, d):
                if not parent.exists():
                    parent.mkdir()
                    created.append(parent)

        def job(template):
            values, diverged, horizon = template_features(fields, template, cfg)
            for rec, v in zip(records, values):
                write_feature(FeatureMap(v, rec.lesion_id, template.name, horizon),
                              feature_path(out_dir, rec.split, rec.lesion_id, template.name))
            return [(rec.lesion_id, template.name) for rec, bad in zip(records, diverged) if bad]

        if cfg.threads > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                flagged = list(pool.map(job, lib))
        else:
            flagged = [job(t) for t in lib]
    except BaseException:
        if not existed:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for d in reversed(created):
                shutil.rmtree(d, ignore_errors=True)
        raise

    for rec in records:
        summary.counts[(rec.split, rec.label)] += len(lib)
    summary.divergent = sorted(pair for group in flagged for pair in group)
    return summary
