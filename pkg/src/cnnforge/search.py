"""Greedy random-driven template search.

Each proposal is a freshly sampled template. It is accepted iff a classifier
retrained from scratch on the features of ``accepted + [proposal]`` reaches a
strictly lower validation loss than the current library did. The validation
loss is the cross-entropy of each validation lesion's class-1 probability
averaged over all library features, mirroring the per-patient pooling of the
decision layer. The starting reference is ln 2, an uninformative predictor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from cnnforge.augment import AugmentConfig, prepare_input, template_features
from cnnforge.classifier import MLPClassifier, TrainConfig
from cnnforge.errors import ContractError, DivergenceError, SearchError
from cnnforge.templates import SearchConfig, TemplateLibrary, sample_template

log = logging.getLogger(__name__)

CHANCE_LOSS = math.log(2.0)


@dataclass
class LesionSet:
    """Prepared inputs (n, H, W) in cell range with binary targets (1 = class1)."""

    fields: np.ndarray
    targets: np.ndarray
    lesion_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.fields.ndim != 3 or len(self.fields) != len(self.targets):
            raise ContractError("lesion set needs (n, H, W) fields and n targets")
        if not self.lesion_ids:
            self.lesion_ids = [f"L{i}" for i in range(len(self.fields))]

    def __len__(self):
        return len(self.fields)

    def subset(self, idx):
        idx = list(idx)
        return LesionSet(self.fields[idx], self.targets[idx], [self.lesion_ids[i] for i in idx])

    @classmethod
    def from_images(cls, images, labels, cfg, lesion_ids=None):
        fields = np.stack([prepare_input(img, cfg) for img in images])
        targets = [1.0 if lab == "class1" else 0.0 for lab in labels]
        return cls(fields, targets, list(lesion_ids or []))


@dataclass(frozen=True)
class SearchEvent:
    index: int
    loss: float  # nan for divergent proposals
    accepted: bool
    template_name: str
    note: str = ""


@dataclass
class SearchReport:
    accepted: TemplateLibrary
    history: list
    initial_loss: float = CHANCE_LOSS

    @property
    def final_validation_loss(self):
        losses = self.acceptance_losses()
        return losses[-1] if losses else self.initial_loss

    def acceptance_losses(self):
        return [e.loss for e in self.history if e.accepted]

    def csv_lines(self):
        lines = ["proposal,template,validation_loss,accepted,note"]
        for e in self.history:
            loss = "nan" if math.isnan(e.loss) else repr(e.loss)
            lines.append(f"{e.index},{e.template_name},{loss},{int(e.accepted)},{e.note}")
        return lines


def stratified_split(targets, fraction, rng):
    """Indices of a per-class ``fraction`` sample (at least one per class), sorted."""
    targets = np.asarray(targets)
    chosen = []
    for cls in np.unique(targets):
        members = np.flatnonzero(targets == cls)
        k = max(1, int(math.ceil(fraction * len(members))))
        chosen.extend(rng.choice(members, size=min(k, len(members)), replace=False).tolist())
    return sorted(chosen)


def default_classifier_factory(max_epochs=60, learning_rate=3e-4, hidden_units=32):
    def factory(seed):
        return MLPClassifier(TrainConfig(rng_seed=seed, max_epochs=max_epochs,
                                         learning_rate=learning_rate, hidden_units=hidden_units))
    return factory


def _bce(p, y):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _child_seed(seed, index):
    return int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index]).generate_state(1)[0])


def search_templates(train, val, cfg, classifier_factory=None, augment=None):
    """Run the greedy search. ``train``/``val`` are LesionSets already on the grid."""
    augment = augment or AugmentConfig()
    classifier_factory = classifier_factory or default_classifier_factory()
    if len(train) == 0 or len(val) == 0:
        raise ContractError("search needs nonempty training and validation sets")
    if len(np.unique(train.targets)) < 2:
        raise ContractError("degenerate training set: a single class is present")

    rng = np.random.default_rng(cfg.rng_seed)
    evaluation = train.subset(stratified_split(train.targets, cfg.eval_subset, rng))
    accepted = []
    cached_train, cached_val = [], []
    current = CHANCE_LOSS
    history = []

    for index in range(cfg.max_proposals):
        if len(accepted) >= cfg.target_count:
            break
        proposal = sample_template(rng, cfg, name=f"s{index:04d}")
        try:
            f_train, _, _ = template_features(evaluation.fields, proposal, augment, stop_on_divergence=True)
            f_val, _, _ = template_features(val.fields, proposal, augment, stop_on_divergence=True)
        except DivergenceError:
            history.append(SearchEvent(index, math.nan, False, proposal.name, "divergent"))
            log.debug("proposal %d diverged", index)
            continue

        X = np.concatenate(cached_train + [f_train])
        y = np.tile(evaluation.targets, len(accepted) + 1)
        Xv = np.concatenate(cached_val + [f_val])
        clf = classifier_factory(_child_seed(cfg.rng_seed, index))
        try:
            clf.fit(X, y)
            probs = np.asarray(clf.predict_proba(Xv)).reshape(len(accepted) + 1, len(val))
            loss = _bce(probs.mean(axis=0), val.targets)
        except ContractError as exc:
            history.append(SearchEvent(index, math.nan, False, proposal.name, f"training failed: {exc}"))
            continue
        ok = loss < current
        history.append(SearchEvent(index, loss, ok, proposal.name))
        if ok:
            accepted.append(proposal)
            cached_train.append(f_train)
            cached_val.append(f_val)
            current = loss
            log.info("accepted %s (%d/%d), validation loss %.6f",
                     proposal.name, len(accepted), cfg.target_count, loss)

    if not accepted:
        raise SearchError("search failed to seed library", history)
    lib = TemplateLibrary(accepted, f"random search, seed {cfg.rng_seed}")
    return SearchReport(lib, history)
