"""Template libraries: text persistence, random sampling, analytic fixtures."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cnnforge.engine import DEFAULT_T_FINAL, DNL_KINDS, TemplateSet
from cnnforge.errors import ContractError, InputError

log = logging.getLogger(__name__)

LIBRARY_HEADER = "cnnforge-templates v1"
DEFAULT_LIBRARY_SIZE = 97
_MATRIX_KEYS = ("A", "B", "C", "D")
_BLOCK_KEYS = _MATRIX_KEYS + ("DNL", "I", "TFINAL")


@dataclass
class TemplateLibrary:
    entries: list = field(default_factory=list)
    source: str = ""
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = list(self.entries)
        names = [t.name for t in self.entries]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ContractError(f"duplicate template names: {', '.join(dupes)}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __eq__(self, other):
        if not isinstance(other, TemplateLibrary):
            return NotImplemented
        return self.entries == other.entries

    @property
    def names(self):
        return [t.name for t in self.entries]

    def with_entry(self, template):
        return TemplateLibrary(self.entries + [template], self.source)


def _fmt(v):
    return repr(float(v))


def format_library(lib):
    lines = [LIBRARY_HEADER]
    for t in lib:
        lines.append(f"template {t.name}")
        for key in _MATRIX_KEYS:
            lines.append(key + " " + " ".join(_fmt(v) for v in getattr(t, key).reshape(-1)))
        lines.append(f"DNL {t.d_nl}")
        lines.append(f"I {_fmt(t.bias)}")
        lines.append(f"TFINAL {_fmt(t.t_final)}")
        lines.append("end")
    return "\n".join(lines) + "\n"


def save_library(lib, path):
    Path(path).write_text(format_library(lib), encoding="utf-8")


def _reals(tokens, where):
    try:
        vals = [float(tok) for tok in tokens]
    except ValueError:
        raise InputError(f"{where}: malformed real") from None
    if not all(math.isfinite(v) for v in vals):
        raise InputError(f"{where}: non-finite value")
    return vals


def parse_library(text, origin="<text>"):
    """Parse the line-oriented library format; errors carry ``origin:line``."""
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        log.warning("%s: empty template library", origin)
        return TemplateLibrary([], origin, [f"{origin}: empty template library"])
    numbered = [(n, line.strip()) for n, line in enumerate(lines, start=1)]
    numbered = [(n, s) for n, s in numbered if s and not s.startswith("#")]
    n0, first = numbered[0]
    if first != LIBRARY_HEADER:
        raise InputError(f"{origin}:{n0}: expected header {LIBRARY_HEADER!r}")

    entries, seen = [], set()
    block = None
    for n, line in numbered[1:]:
        where = f"{origin}:{n}"
        key, _, rest = line.partition(" ")
        tokens = rest.split()
        if block is None:
            if key != "template" or len(tokens) != 1:
                raise InputError(f"{where}: expected 'template <name>'")
            name = tokens[0]
            if name in seen:
                raise InputError(f"{where}: duplicate template name {name!r}")
            seen.add(name)
            block = {"name": name, "line": n}
            continue
        if key == "end":
            missing = [k for k in _BLOCK_KEYS if k not in block]
            if missing:
                raise InputError(f"{where}: template {block['name']!r} missing {', '.join(missing)}")
            try:
                entries.append(TemplateSet(
                    block["name"],
                    *(np.array(block[k]).reshape(3, 3) for k in _MATRIX_KEYS),
                    d_nl=block["DNL"], bias=block["I"], t_final=block["TFINAL"]))
            except ContractError as exc:
                raise InputError(f"{origin}:{block['line']}: {exc}") from None
            block = None
            continue
        if key not in _BLOCK_KEYS:
            raise InputError(f"{where}: unknown key {key!r}")
        if key in block:
            raise InputError(f"{where}: repeated key {key!r}")
        if key in _MATRIX_KEYS:
            if len(tokens) != 9:
                raise InputError(f"{where}: {key} needs 9 values, got {len(tokens)}")
            block[key] = _reals(tokens, where)
        elif key == "DNL":
            if len(tokens) != 1 or tokens[0] not in DNL_KINDS:
                raise InputError(f"{where}: DNL must be one of {', '.join(DNL_KINDS)}")
            block[key] = tokens[0]
        else:
            if len(tokens) != 1:
                raise InputError(f"{where}: {key} needs 1 value, got {len(tokens)}")
            block[key] = _reals(tokens, where)[0]
    if block is not None:
        raise InputError(f"{origin}:{block['line']}: template {block['name']!r} not terminated by 'end'")
    return TemplateLibrary(entries, origin)


def load_library(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read template library {path}: {exc.strerror}") from exc
    except UnicodeDecodeError:
        raise InputError(f"{path}: template library is not UTF-8") from None
    return parse_library(text, str(path))


@dataclass(frozen=True)
class SearchConfig:
    rng_seed: int = 0
    value_range: float = 4.0
    bias_range: float = 2.0
    t_final_choices: tuple = (0.5, 1.0, 1.5, 2.0, 2.5)
    max_proposals: int = 500
    target_count: int = DEFAULT_LIBRARY_SIZE
    eval_subset: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "t_final_choices", tuple(float(t) for t in self.t_final_choices))
        if not (self.value_range > 0 and self.bias_range > 0):
            raise ContractError("sampling ranges must be positive")
        if self.target_count < 1:
            raise ContractError("target_count must be >= 1")
        if self.max_proposals < 0:
            raise ContractError("max_proposals must be >= 0")
        if not 0 < self.eval_subset <= 1:
            raise ContractError("eval_subset must lie in (0, 1]")
        if not self.t_final_choices or min(self.t_final_choices) <= 0:
            raise ContractError("t_final_choices must be nonempty and positive")


def sample_template(rng, cfg, name="sample"):
    """Draw one template set; ``rng`` is a ``numpy.random.Generator``."""
    mats = rng.uniform(-cfg.value_range, cfg.value_range, size=(4, 3, 3))
    bias = rng.uniform(-cfg.bias_range, cfg.bias_range)
    d_nl = DNL_KINDS[int(rng.integers(len(DNL_KINDS)))]
    t_final = cfg.t_final_choices[int(rng.integers(len(cfg.t_final_choices)))]
    return TemplateSet(name, *mats, d_nl=d_nl, bias=bias, t_final=t_final)


def _center(v):
    m = np.zeros((3, 3))
    m[1, 1] = v
    return m


def builtin_oracles(t_final=DEFAULT_T_FINAL):
    """Templates whose equilibria are closed-form: x* = R_x * (B*u + I)."""
    return TemplateLibrary(
        [
            TemplateSet("zero", t_final=t_final),
            TemplateSet("identity_pass", B=_center(1.0), t_final=t_final),
            TemplateSet("local_mean", B=np.full((3, 3), 1.0 / 9.0), t_final=t_final),
            TemplateSet("bias_drive", bias=1.0, t_final=t_final),
        ],
        "builtin analytic oracles",
    )
