"""Command-line entry point: ``cnnforge <command> [options]``.

Every option can also come from a ``key = value`` file given with
``--config``; flags win over the file. Commands that write an output
directory stamp the resolved configuration into ``run.cfg`` there.

Exit codes: 0 success, 2 input error, 3 contract violation,
4 divergence or search failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from cnnforge import __version__
from cnnforge.augment import FEATURE_SUFFIX, AugmentConfig, augment_dataset, generate_features
from cnnforge.classifier import TrainConfig, load_model, predict, save_model, stack_features, train_arrays
from cnnforge.decision import compute_metrics, decide_all, recist_assess, recist_to_class
from cnnforge.engine import IntegrationConfig
from cnnforge.errors import CnnForgeError, ContractError, InputError
from cnnforge.imaging import (
    cells_to_gray,
    crop_roi,
    read_feature,
    read_manifest,
    read_pgm,
    resolve_image,
    write_feature,
    write_pgm,
)
from cnnforge.search import LesionSet, default_classifier_factory, search_templates, stratified_split
from cnnforge.synth import SynthConfig, generate_synth
from cnnforge.templates import SearchConfig, load_library, save_library

log = logging.getLogger("cnnforge")

# option name -> (type, default); shared by flags and config files
KEYS = {
    "grid": (str, "64x64"),
    "dt": (float, 0.05),
    "tfinal": (float, None),
    "method": (str, "rk4"),
    "boundary": (str, "zero"),
    "capacitance": (float, 1.0),
    "r_x": (float, 1.0),
    "seed": (int, 0),
    "threads": (int, 1),
    "target_count": (int, 97),
    "max_proposals": (int, 500),
    "value_range": (float, 4.0),
    "bias_range": (float, 2.0),
    "eval_subset": (float, 0.5),
    "t_final_choices": (str, "0.5,1.0,1.5,2.0,2.5"),
    "search_epochs": (int, 150),
    "epochs": (int, 50),
    "learning_rate": (float, 3e-4),
    "batch_size": (int, 10),
    "momentum": (float, 0.9),
    "hidden_units": (int, 64),
    "patience": (int, 20),
    "val_fraction": (float, 0.2),
}


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from exc
    values = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise InputError(f"{path}:{n}: expected key = value")
        if key not in KEYS:
            raise InputError(f"{path}:{n}: unknown config key {key!r}")
        try:
            values[key] = KEYS[key][0](value.strip())
        except ValueError:
            raise InputError(f"{path}:{n}: bad value for {key}: {value.strip()!r}") from None
    return values


def resolve(args, used):
    """Defaults <- config file <- flags, restricted to the keys a command uses."""
    cfg = {k: KEYS[k][1] for k in used}
    if args.config:
        cfg.update({k: v for k, v in read_config(args.config).items() if k in used})
    for k in used:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def stamp(out_dir, command, cfg):
    lines = [f"# cnnforge {__version__}", f"command = {command}"]
    lines += [f"{k} = {'' if v is None else v}" for k, v in sorted(cfg.items())]
    Path(out_dir, "run.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_grid(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InputError(f"grid must look like WxH, got {text!r}") from None
    return w, h


def integration_config(cfg):
    return IntegrationConfig(dt=cfg["dt"], method=cfg["method"], boundary=cfg["boundary"],
                             capacitance=cfg["capacitance"], r_x=cfg["r_x"])


def augment_config(cfg):
    w, h = parse_grid(cfg["grid"])
    return AugmentConfig(w, h, integration_config(cfg), t_final=cfg.get("tfinal"),
                         threads=cfg.get("threads", 1))


def train_config(cfg):
    return TrainConfig(batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                       max_epochs=cfg["epochs"], momentum=cfg["momentum"], rng_seed=cfg["seed"],
                       hidden_units=cfg["hidden_units"], early_stop_patience=cfg["patience"])


def existing_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def validation_split(records, fraction, seed):
    """Use explicit ``val`` rows if present, else a seeded stratified lesion-level split of train."""
    train = [r for r in records if r.split == "train"]
    val = [r for r in records if r.split == "val"]
    if val or not train:
        return train, val
    targets = [r.label == "class1" for r in train]
    picked = set(stratified_split(targets, fraction, np.random.default_rng(seed)))
    return ([r for i, r in enumerate(train) if i not in picked],
            [r for i, r in enumerate(train) if i in picked])


# -- commands ---------------------------------------------------------------

ENGINE_KEYS = ("grid", "dt", "tfinal", "method", "boundary", "capacitance", "r_x")


def cmd_synth(args):
    out = Path(args.out)
    kw = {"rng_seed": args.seed if args.seed is not None else 0}
    if args.n_train is not None:
        kw.update(n_train_class1=args.n_train, n_train_class2=args.n_train)
    if args.n_test is not None:
        kw.update(n_test_class1=args.n_test, n_test_class2=args.n_test)
    records = generate_synth(SynthConfig(**kw), out)
    counts = defaultdict(int)
    for r in records:
        counts[r.split] += 1
    print(f"wrote {len(records)} lesions to {out / 'manifest.csv'} "
          f"(train {counts['train']}, test {counts['test']})")


def cmd_simulate(args):
    cfg = resolve(args, ENGINE_KEYS)
    lib = load_library(existing_file(args.templates, "template library"))
    img = read_pgm(existing_file(args.image, "image"))
    if args.roi:
        w, h = parse_grid(args.roi)
        if args.center:
            try:
                cx, cy = (int(v) for v in args.center.split(","))
            except ValueError:
                raise InputError(f"center must look like X,Y, got {args.center!r}") from None
        else:
            cx, cy = img.width // 2, img.height // 2
        img = crop_roi(img, (cx, cy), (w, h))
    maps = generate_features(img, lib, augment_config(cfg), lesion_id=Path(args.image).stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmap in maps:
        write_feature(fmap, out / f"{fmap.template_name}{FEATURE_SUFFIX}")
        write_pgm(cells_to_gray(fmap.values), out / f"{fmap.template_name}.pgm")
        if fmap.divergent:
            print(f"warning: template {fmap.template_name} diverged; map zeroed", file=sys.stderr)
    stamp(out, "simulate", cfg)
    print(f"wrote {len(maps)} feature maps to {out}")


def cmd_augment(args):
    cfg = resolve(args, ENGINE_KEYS + ("threads",))
    manifest = existing_file(args.manifest, "manifest")
    records = read_manifest(manifest)
    lib = load_library(existing_file(args.templates, "template library"))
    out = Path(args.out)
    summary = augment_dataset(records, lib, augment_config(cfg), out, manifest)
    out.mkdir(parents=True, exist_ok=True)
    lines = summary.csv_lines()
    if not records:
        lines += ["train,total,0", "test,total,0"]
    Path(out, "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if summary.divergent:
        Path(out, "divergent.csv").write_text(
            "lesion_id,template_name\n" + "".join(f"{a},{b}\n" for a, b in summary.divergent),
            encoding="utf-8")
    stamp(out, "augment", cfg)
    print("\n".join(lines))


SEARCH_KEYS = ENGINE_KEYS + ("seed", "target_count", "max_proposals", "value_range", "bias_range",
                             "eval_subset", "t_final_choices", "search_epochs", "learning_rate",
                             "val_fraction")


def cmd_search(args):
    cfg = resolve(args, SEARCH_KEYS)
    manifest = existing_file(args.manifest, "manifest")
    records = read_manifest(manifest)
    train_recs, val_recs = validation_split(records, cfg["val_fraction"], cfg["seed"])
    if not train_recs or not val_recs:
        raise InputError("search needs training and validation lesions in the manifest")
    try:
        choices = tuple(float(v) for v in cfg["t_final_choices"].split(","))
    except ValueError:
        raise InputError(f"bad t_final_choices {cfg['t_final_choices']!r}") from None
    scfg = SearchConfig(rng_seed=cfg["seed"], value_range=cfg["value_range"],
                        bias_range=cfg["bias_range"], t_final_choices=choices,
                        max_proposals=cfg["max_proposals"], target_count=cfg["target_count"],
                        eval_subset=cfg["eval_subset"])
    aug = augment_config(cfg)

    def lesions(recs):
        imgs = [read_pgm(existing_file(resolve_image(r, manifest), f"image of lesion {r.lesion_id}"))
                for r in recs]
        return LesionSet.from_images(imgs, [r.label for r in recs], aug, [r.lesion_id for r in recs])

    factory = default_classifier_factory(cfg["search_epochs"], cfg["learning_rate"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp(out, "search", cfg)
    try:
        report = search_templates(lesions(train_recs), lesions(val_recs), scfg, factory, aug)
    except CnnForgeError as exc:
        history = getattr(exc, "history", None)
        if history is not None:
            from cnnforge.search import SearchReport
            from cnnforge.templates import TemplateLibrary
            _write_history(out, SearchReport(TemplateLibrary(), history))
        raise
    save_library(report.accepted, out / "templates.txt")
    _write_history(out, report)
    losses = report.acceptance_losses()
    print(f"accepted {len(report.accepted)} templates after {len(report.history)} proposals")
    print(f"validation loss {report.initial_loss:.6f} -> {report.final_validation_loss:.6f}")
    if len(report.accepted) < scfg.target_count:
        print(f"warning: target of {scfg.target_count} not reached", file=sys.stderr)
    return 0 if losses else 4


def _write_history(out, report):
    Path(out, "history.csv").write_text("\n".join(report.csv_lines()) + "\n", encoding="utf-8")


def _load_split_features(feature_dir, records):
    """Stack every feature file of each record; all lesions must carry the same templates."""
    maps, owners, names = [], [], None
    for rec in records:
        d = Path(feature_dir) / rec.split / rec.lesion_id
        files = sorted(d.glob(f"*{FEATURE_SUFFIX}"))
        if not files:
            raise InputError(f"no feature files for lesion {rec.lesion_id} under {d}")
        these = [f.name for f in files]
        if names is None:
            names = these
        elif these != names:
            raise InputError(f"lesion {rec.lesion_id} has a different template set")
        for f in files:
            maps.append(read_feature(f))
            owners.append(rec)
    return maps, owners


TRAIN_KEYS = ("seed", "epochs", "learning_rate", "batch_size", "momentum", "hidden_units",
              "patience", "val_fraction")


def cmd_train(args):
    cfg = resolve(args, TRAIN_KEYS)
    records = read_manifest(existing_file(args.manifest, "manifest"))
    train_recs, val_recs = validation_split(records, cfg["val_fraction"], cfg["seed"])
    if not train_recs:
        raise InputError("manifest has no training lesions")
    maps, owners = _load_split_features(args.features, train_recs)
    X = stack_features(maps)
    y = np.array([o.label == "class1" for o in owners], dtype=np.float64)
    Xv = yv = None
    if val_recs:
        vmaps, vowners = _load_split_features(args.features, val_recs)
        if vmaps[0].values.shape != maps[0].values.shape:
            raise ContractError("validation and training features differ in size")
        Xv = stack_features(vmaps)
        yv = np.array([o.label == "class1" for o in vowners], dtype=np.float64)
    model = train_arrays(X, y, train_config(cfg), Xv, yv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.npz")
    with (out / "loss.csv").open("w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for i, loss in enumerate(model.loss_curve):
            v = model.val_curve[i] if i < len(model.val_curve) else ""
            fh.write(f"{i},{loss!r},{v!r}\n" if v != "" else f"{i},{loss!r},\n")
    stamp(out, "train", cfg)
    final = model.loss_curve[-1] if model.loss_curve else float("nan")
    print(f"trained on {len(maps)} feature maps ({len(train_recs)} lesions); "
          f"{len(model.loss_curve)} epochs, final training loss {final:.6f}")


PREDICTION_COLUMNS = ("patient_id", "lesion_id", "template_name", "p_class1", "label")


def cmd_predict(args):
    model_path = Path(args.model)
    if model_path.is_dir():
        model_path = model_path / "model.npz"
    model = load_model(existing_file(model_path, "model"))
    records = [r for r in read_manifest(existing_file(args.manifest, "manifest")) if r.split == args.split]
    feature_dir = Path(args.features)
    if not feature_dir.is_dir() or not any(feature_dir.rglob(f"*{FEATURE_SUFFIX}")):
        raise InputError(f"no feature files under {feature_dir}")
    if not records:
        raise InputError(f"manifest has no {args.split} lesions")
    maps, owners = _load_split_features(feature_dir, records)
    rows = []
    for fmap, rec in zip(maps, owners):
        c = predict(model, fmap)
        rows.append((rec.patient_id, rec.lesion_id, c.template_name, repr(c.p_class1), c.hard_label))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        w.writerows(rows)
    print(f"wrote {len(rows)} classifications to {out}")


class _Vote:
    __slots__ = ("patient_id", "hard_label")

    def __init__(self, patient_id, hard_label):
        self.patient_id = patient_id
        self.hard_label = hard_label


def read_predictions(path):
    path = existing_file(path, "predictions")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in PREDICTION_COLUMNS):
            raise InputError(f"{path}: expected columns {','.join(PREDICTION_COLUMNS)}")
        votes = []
        for n, row in enumerate(reader, start=2):
            if row["label"] not in ("class1", "class2"):
                raise InputError(f"{path}:{n}: unknown label {row['label']!r}")
            votes.append(_Vote(row["patient_id"], row["label"]))
    if not votes:
        raise InputError(f"{path}: no predictions")
    return votes


def cmd_evaluate(args):
    votes = read_predictions(args.predictions)
    truth = {}
    for r in read_manifest(existing_file(args.manifest, "manifest")):
        if truth.setdefault(r.patient_id, r.label) != r.label:
            raise ContractError(f"patient {r.patient_id} has lesions with different labels")
    decisions = decide_all(votes)
    missing = [d.patient_id for d in decisions if d.patient_id not in truth]
    if missing:
        raise InputError(f"patients missing from manifest: {', '.join(missing[:5])}")
    report = compute_metrics([(d, truth[d.patient_id]) for d in decisions])
    print(f"patients: {len(decisions)}")
    print(report.text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        Path(out, "metrics.csv").write_text("\n".join(report.csv_lines()) + "\n", encoding="utf-8")
        with Path(out, "decisions.csv").open("w", encoding="utf-8") as fh:
            fh.write("patient_id,votes_class1,votes_class2,decided,true_label\n")
            for d in decisions:
                fh.write(f"{d.patient_id},{d.votes_class1},{d.votes_class2},{d.decided},{truth[d.patient_id]}\n")
        Path(out, "metrics.txt").write_text(report.text() + "\n", encoding="utf-8")


def cmd_recist(args):
    a = recist_assess(args.baseline_mm, args.followup_mm, args.disappeared)
    print(f"{a.category} {recist_to_class(a)}")


# -- parser -----------------------------------------------------------------

def _add_keys(p, keys):
    for k in keys:
        typ, _ = KEYS[k]
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=typ, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="cnnforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cnnforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write a synthetic blob/ring lesion corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int, help="training lesions per class")
    p.add_argument("--n-test", type=int, help="test lesions per class")

    p = command("simulate", cmd_simulate, "generate feature maps for one image")
    p.add_argument("--templates", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--roi", help="crop a WxH window before resizing")
    p.add_argument("--center", help="ROI center X,Y (default: image center)")
    _add_keys(p, ENGINE_KEYS)

    p = command("augment", cmd_augment, "generate feature maps for every lesion in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--out", required=True)
    _add_keys(p, ENGINE_KEYS + ("threads",))

    p = command("search", cmd_search, "random-driven template search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_keys(p, SEARCH_KEYS)

    p = command("train", cmd_train, "train the feature classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_keys(p, TRAIN_KEYS)

    p = command("predict", cmd_predict, "classify every feature map of a split")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)

    p = command("evaluate", cmd_evaluate, "per-patient decisions and metrics")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")

    p = command("recist", cmd_recist, "RECIST 1.1 category of an LD-sum change")
    p.add_argument("--baseline-mm", type=float, required=True)
    p.add_argument("--followup-mm", type=float, required=True)
    p.add_argument("--disappeared", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except CnnForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
