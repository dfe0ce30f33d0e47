"""Transient simulation of a 2D cellular nonlinear network.

Cell dynamics (per cell ``(i, j)``, neighborhood of Chebyshev radius 1)::

    C dx/dt = -x/R_x + sum A*y + sum B*u + sum Cst*x + sum D*phi(y_kl - y_ij) + I
    y = 0.5 * (|x + 1| - |x - 1|)

Templates are stored as 3x3 arrays indexed by neighbor offset: ``T[a, b]``
weights the cell at ``(i + a - 1, j + b - 1)`` (correlation orientation).
Grids are ``float64`` arrays of shape ``(rows, cols)``; the batched entry
point accepts any number of leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from cnnforge.errors import ContractError, DivergenceError

DNL_KINDS = ("identity", "pwl_diff", "cubic_diff")
BOUNDARIES = ("zero", "replicate")
METHODS = ("euler", "rk4")

DEFAULT_DT = 0.05
DEFAULT_T_FINAL = 2.5
DEFAULT_GUARD = 1e6


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    radius: int = 1
    boundary: str = "zero"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.radius < 1:
            raise ContractError(f"radius must be >= 1, got {self.radius}")
        if self.boundary not in BOUNDARIES:
            raise ContractError(f"unknown boundary mode {self.boundary!r}")


def _template_array(name, value):
    arr = np.array(value, dtype=np.float64)
    if arr.shape != (3, 3):
        raise ContractError(f"template {name} must be 3x3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"template {name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TemplateSet:
    """One generative model: cloning templates, nonlinearity, bias and horizon."""

    name: str
    A: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    B: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    C: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    D: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    d_nl: str = "identity"
    bias: float = 0.0
    t_final: float = DEFAULT_T_FINAL

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise ContractError(f"template name must be a nonempty token, got {self.name!r}")
        for key in "ABCD":
            object.__setattr__(self, key, _template_array(key, getattr(self, key)))
        if self.d_nl not in DNL_KINDS:
            raise ContractError(f"unknown nonlinearity {self.d_nl!r}")
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "t_final", float(self.t_final))
        if not math.isfinite(self.bias):
            raise ContractError("bias must be finite")
        if not (math.isfinite(self.t_final) and self.t_final > 0):
            raise ContractError(f"t_final must be positive, got {self.t_final}")

    def __eq__(self, other):
        if not isinstance(other, TemplateSet):
            return NotImplemented
        return (
            self.name == other.name
            and self.d_nl == other.d_nl
            and self.bias == other.bias
            and self.t_final == other.t_final
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "ABCD")
        )

    __hash__ = None

    @property
    def is_classic(self):
        """True when the state and nonlinear templates vanish."""
        return not self.C.any() and not self.D.any()

    def renamed(self, name):
        return replace(self, name=name)


@dataclass(frozen=True)
class IntegrationConfig:
    dt: float = DEFAULT_DT
    method: str = "rk4"
    capacitance: float = 1.0
    r_x: float = 1.0
    checkpoint_times: tuple = ()
    boundary: str = "zero"
    blowup_guard: float = DEFAULT_GUARD
    record_states: bool = False

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_times", tuple(float(t) for t in self.checkpoint_times))
        if not self.dt > 0:
            raise ContractError(f"dt must be positive, got {self.dt}")
        if self.method not in METHODS:
            raise ContractError(f"unknown integration method {self.method!r}")
        if not (self.capacitance > 0 and self.r_x > 0):
            raise ContractError("capacitance and r_x must be positive")
        if self.boundary not in BOUNDARIES:
            raise ContractError(f"unknown boundary mode {self.boundary!r}")
        if not self.blowup_guard > 0:
            raise ContractError("blowup_guard must be positive")
        ts = self.checkpoint_times
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ContractError("checkpoint_times must be strictly increasing")

    def checkpoints_for(self, t_final):
        ts = self.checkpoint_times or (t_final,)
        if ts[0] <= 0 or ts[-1] > t_final * (1 + 1e-12):
            raise ContractError(f"checkpoint times must lie in (0, {t_final}]")
        if self.dt > t_final:
            raise ContractError(f"dt={self.dt} exceeds the horizon {t_final}")
        return ts


@dataclass
class TransientResult:
    """Outputs at each checkpoint plus the state at the horizon.

    ``states`` is filled only when ``IntegrationConfig.record_states`` is set.
    """

    outputs: list
    final_state: np.ndarray
    states: list = field(default_factory=list)

    @property
    def times(self):
        return [t for t, _ in self.outputs]

    def output_at(self, t):
        for tc, y in self.outputs:
            if tc == t:
                return y
        raise KeyError(t)


@dataclass
class BatchResult:
    times: tuple
    outputs: list  # one (..., M, N) array per checkpoint
    final_state: np.ndarray
    states: list
    diverged: np.ndarray  # bool, batch shape
    diverged_at: np.ndarray  # float, nan where not diverged


def pwl_output(x):
    """Piecewise-linear saturation 0.5(|x+1| - |x-1|), elementwise for arrays.

    Evaluated as a clip: the literal formula rounds to 1 + 2e-16 for some large |x|.
    """
    if np.ndim(x) == 0:
        if not math.isfinite(x):
            raise DivergenceError("non-finite activation")
        return min(1.0, max(-1.0, float(x)))
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite activation")
    return _pwl(x)


def _pwl(x):
    return np.clip(x, -1.0, 1.0)


class Neighbor(NamedTuple):
    k: int
    l: int
    source: tuple | None  # in-grid cell read for this position, None for a zero cell


def neighborhood_offsets(spec, i, j):
    """All (2r+1)^2 logical neighbor positions of cell (i, j).

    Positions outside the grid are virtual: zero cells (``source is None``)
    or, for the replicate boundary, the nearest edge cell.
    """
    if not (0 <= i < spec.rows and 0 <= j < spec.cols):
        raise ContractError(f"index out of grid: ({i}, {j}) in {spec.rows}x{spec.cols}")
    r = spec.radius
    out = []
    for k in range(i - r, i + r + 1):
        for l in range(j - r, j + r + 1):
            if 0 <= k < spec.rows and 0 <= l < spec.cols:
                src = (k, l)
            elif spec.boundary == "replicate":
                src = (min(max(k, 0), spec.rows - 1), min(max(l, 0), spec.cols - 1))
            else:
                src = None
            out.append(Neighbor(k, l, src))
    return out


def _pad(a, boundary):
    rows, cols = a.shape[-2:]
    lead = a.shape[:-2]
    if boundary == "zero":
        out = np.zeros(lead + (rows + 2, cols + 2))
        out[..., 1:-1, 1:-1] = a
        return out
    out = np.empty(lead + (rows + 2, cols + 2))
    out[..., 1:-1, 1:-1] = a
    out[..., 0, 1:-1] = a[..., 0, :]
    out[..., -1, 1:-1] = a[..., -1, :]
    out[..., :, 0] = out[..., :, 1]
    out[..., :, -1] = out[..., :, -2]
    return out


def _weight(w, a, b):
    # (3,3) -> scalar; (..., 3, 3) -> (..., 1, 1) for broadcasting over the grid
    v = w[..., a, b]
    return v if v.ndim == 0 else v[..., None, None]


def _correlate(padded, w, rows, cols):
    acc = _weight(w, 0, 0) * padded[..., 0:rows, 0:cols]
    tmp = np.empty_like(acc)
    for a in range(3):
        for b in range(3):
            if a or b:
                np.multiply(_weight(w, a, b), padded[..., a:a + rows, b:b + cols], out=tmp)
                acc += tmp
    return acc


class _Stacked:
    """Template parameters stacked along the batch axes."""

    def __init__(self, templates, batch_shape):
        if isinstance(templates, TemplateSet):
            self.A, self.B, self.C, self.D = templates.A, templates.B, templates.C, templates.D
            self.bias = templates.bias
            self.kinds = templates.d_nl
        else:
            templates = list(templates)
            n = int(np.prod(batch_shape))
            if len(templates) != n:
                raise ContractError(f"{len(templates)} templates for a batch of {n}")
            for key in "ABCD":
                arr = np.stack([getattr(t, key) for t in templates]).reshape(batch_shape + (3, 3))
                setattr(self, key, arr)
            self.bias = np.array([t.bias for t in templates]).reshape(batch_shape)[..., None, None]
            kinds = {t.d_nl for t in templates}
            if len(kinds) == 1:
                self.kinds = kinds.pop()
            else:
                codes = np.array([DNL_KINDS.index(t.d_nl) for t in templates])
                self.kinds = codes.reshape(batch_shape)[..., None, None]
        self.has_c = bool(np.any(self.C))
        self.has_d = bool(np.any(self.D))
        self.linear_d = self.has_d and isinstance(self.kinds, str) and self.kinds == "identity"
        if self.linear_d:
            d_sum = self.D.sum(axis=(-2, -1))
            self.d_sum = d_sum if d_sum.ndim == 0 else d_sum[..., None, None]
            self.A_plus_D = self.A + self.D

    def phi(self, z):
        kinds = self.kinds
        if isinstance(kinds, str):
            if kinds == "identity":
                return z
            if kinds == "pwl_diff":
                return _pwl(z)
            return z * z * z
        return np.where(kinds == 0, z, np.where(kinds == 1, _pwl(z), z * z * z))


def _derivative(x, drive, p, cfg, rows, cols):
    """dx/dt given the precomputed constant part ``drive = B*u + I``."""
    y = _pwl(x)
    py = _pad(y, cfg.boundary)
    if p.linear_d:
        # sum D*(y_kl - y_ij) == (D correlated with y) - (sum D) * y
        total = _correlate(py, p.A_plus_D, rows, cols) - p.d_sum * y
    else:
        total = _correlate(py, p.A, rows, cols)
        if p.has_d:
            for a in range(3):
                for b in range(3):
                    if a == 1 and b == 1:
                        continue  # phi(0) == 0 for every selector
                    diff = py[..., a:a + rows, b:b + cols] - y
                    total += _weight(p.D, a, b) * p.phi(diff)
    total -= x / cfg.r_x
    total += drive
    if p.has_c:
        total += _correlate(_pad(x, cfg.boundary), p.C, rows, cols)
    if cfg.capacitance != 1.0:
        total /= cfg.capacitance
    return total


def time_nodes(t_final, dt, checkpoints):
    """Integration nodes: multiples of dt merged with the checkpoint times.

    Grid points closer than ``1e-9 * dt`` to a checkpoint are dropped so no
    degenerate step is taken.
    """
    tol = 1e-9 * dt
    marks = sorted(set(checkpoints) | {t_final})
    nodes = []
    k = 1
    for mark in marks:
        while k * dt < mark - tol:
            nodes.append(k * dt)
            k += 1
        if k * dt <= mark + tol:
            k += 1
        nodes.append(mark)
    return nodes


def _check_inputs(u, x0):
    u = np.asarray(u, dtype=np.float64)
    x0 = u.copy() if x0 is None else np.asarray(x0, dtype=np.float64)
    if u.ndim < 2:
        raise ContractError(f"cell fields must be 2D, got shape {u.shape}")
    if u.shape != x0.shape:
        raise ContractError(f"input {u.shape} and state {x0.shape} dimensions differ")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(x0))):
        raise ContractError("cell fields must be finite")
    return u, x0


def cell_derivative(x, u, template, cfg=None):
    """dx/dt for every cell of a single grid."""
    cfg = cfg or IntegrationConfig()
    u, x = _check_inputs(u, x)
    rows, cols = x.shape[-2:]
    p = _Stacked(template, x.shape[:-2])
    with np.errstate(over="ignore", invalid="ignore"):
        drive = _correlate(_pad(u, cfg.boundary), p.B, rows, cols) + p.bias
        dx = _derivative(x, drive, p, cfg, rows, cols)
    if not np.all(np.isfinite(dx)):
        raise DivergenceError("divergent dynamics: non-finite derivative")
    return dx


def run_batch(u, templates, cfg=None, x0=None, t_final=None, on_divergence="raise"):
    """Integrate many grids at once.

    ``u`` has shape ``(..., M, N)``. ``templates`` is one TemplateSet shared
    by the whole batch or a sequence with one entry per batch element. With
    ``on_divergence="mask"`` diverging elements are frozen at zero and
    reported in ``BatchResult.diverged`` instead of raising.
    """
    cfg = cfg or IntegrationConfig()
    u, x = _check_inputs(u, x0)
    x = x.copy()
    batch_shape = u.shape[:-2]
    rows, cols = u.shape[-2:]
    p = _Stacked(templates, batch_shape)
    if t_final is None:
        if isinstance(templates, TemplateSet):
            t_final = templates.t_final
        else:
            horizons = {t.t_final for t in templates}
            if len(horizons) != 1:
                raise ContractError("batched templates must share t_final or pass it explicitly")
            t_final = horizons.pop()
    checkpoints = cfg.checkpoints_for(t_final)
    nodes = time_nodes(t_final, cfg.dt, checkpoints)
    wanted = set(checkpoints)

    diverged = np.zeros(batch_shape, dtype=bool)
    diverged_at = np.full(batch_shape, np.nan)
    outputs, states = [], []
    with np.errstate(over="ignore", invalid="ignore"):
        drive = _correlate(_pad(u, cfg.boundary), p.B, rows, cols) + p.bias
        t = 0.0
        for node in nodes:
            h = node - t
            if cfg.method == "euler":
                x = x + h * _derivative(x, drive, p, cfg, rows, cols)
            else:
                k1 = _derivative(x, drive, p, cfg, rows, cols)
                k2 = _derivative(x + 0.5 * h * k1, drive, p, cfg, rows, cols)
                k3 = _derivative(x + 0.5 * h * k2, drive, p, cfg, rows, cols)
                k4 = _derivative(x + h * k3, drive, p, cfg, rows, cols)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = node
            mag = np.abs(x).max(axis=(-2, -1))
            bad = ~(mag <= cfg.blowup_guard) & ~diverged
            if bad.any():
                if on_divergence == "raise":
                    raise DivergenceError(
                        f"divergent dynamics: |x| exceeded {cfg.blowup_guard:g} at t={t:.6g}", time=t
                    )
                diverged |= bad
                diverged_at[bad] = t
                x[bad] = 0.0
            if diverged.any():
                x[diverged] = 0.0
            if t in wanted:
                outputs.append(_pwl(x))
                if cfg.record_states:
                    states.append(x.copy())
    return BatchResult(tuple(checkpoints), outputs, x, states, diverged, diverged_at)


def run_transient(u, template, cfg=None, x0=None):
    """Integrate one grid from ``x0`` (default: the input itself) to ``template.t_final``."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ContractError(f"run_transient expects a 2D field, got shape {u.shape}")
    res = run_batch(u, template, cfg, x0=x0)
    return TransientResult(list(zip(res.times, res.outputs)), res.final_state, res.states)


def steady_state_bound(template, cfg=None):
    """Upper bound on |x| for classic templates (Cst = D = 0) with |u| <= 1."""
    cfg = cfg or IntegrationConfig()
    if not template.is_classic:
        raise ContractError("bound undefined for extended templates")
    return 1.0 + cfg.r_x * (np.abs(template.A).sum() + np.abs(template.B).sum() + abs(template.bias))


def decay_oracle(x0, t, cfg=None):
    """Closed-form state of the leak-only system: x0 * exp(-t / (R_x C))."""
    cfg = cfg or IntegrationConfig()
    return np.asarray(x0, dtype=np.float64) * math.exp(-t / (cfg.r_x * cfg.capacitance))


def fixed_point(u, template, cfg=None):
    """Equilibrium R_x * (B*u + I) of a purely feedforward template (A = Cst = D = 0)."""
    cfg = cfg or IntegrationConfig()
    if template.A.any() or not template.is_classic:
        raise ContractError("closed-form fixed point requires A = Cst = D = 0")
    u = np.asarray(u, dtype=np.float64)
    rows, cols = u.shape[-2:]
    return cfg.r_x * (_correlate(_pad(u, cfg.boundary), template.B, rows, cols) + template.bias)
