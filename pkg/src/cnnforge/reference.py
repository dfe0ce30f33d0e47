"""Loop-per-cell scalar integrator used as ground truth for the engine.

Deliberately naive: plain Python floats and nested loops, no numpy
arithmetic (arrays appear only in the returned result) and nothing imported from the engine beyond the config types.
Intended for grids up to 32x32.
"""

import numpy as np

from cnnforge.engine import TransientResult
from cnnforge.errors import ContractError, DivergenceError

MAX_SIDE = 32


def _sat(v):
    return 0.5 * (abs(v + 1.0) - abs(v - 1.0))


def _nonlinear(kind, z):
    if kind == "identity":
        return z
    if kind == "pwl_diff":
        return 0.5 * (abs(z + 1.0) - abs(z - 1.0))
    return z ** 3


def _read(grid, k, l, rows, cols, boundary):
    if 0 <= k < rows and 0 <= l < cols:
        return grid[k][l]
    if boundary == "zero":
        return 0.0
    kk = 0 if k < 0 else (rows - 1 if k >= rows else k)
    ll = 0 if l < 0 else (cols - 1 if l >= cols else l)
    return grid[kk][ll]


def _rates(x, u, tpl, cfg, rows, cols):
    A = [[float(v) for v in row] for row in tpl.A]
    B = [[float(v) for v in row] for row in tpl.B]
    Cs = [[float(v) for v in row] for row in tpl.C]
    D = [[float(v) for v in row] for row in tpl.D]
    y = [[_sat(x[i][j]) for j in range(cols)] for i in range(rows)]
    out = []
    for i in range(rows):
        row = []
        for j in range(cols):
            s = -x[i][j] / cfg.r_x
            for a in range(3):
                for b in range(3):
                    k, l = i + a - 1, j + b - 1
                    ykl = _read(y, k, l, rows, cols, cfg.boundary)
                    s += A[a][b] * ykl
                    s += B[a][b] * _read(u, k, l, rows, cols, cfg.boundary)
                    s += Cs[a][b] * _read(x, k, l, rows, cols, cfg.boundary)
                    s += D[a][b] * _nonlinear(tpl.d_nl, ykl - y[i][j])
            s += tpl.bias
            row.append(s / cfg.capacitance)
        out.append(row)
    return out


def _axpy(x, h, k):
    return [[xv + h * kv for xv, kv in zip(xr, kr)] for xr, kr in zip(x, k)]


def simulate_reference(u, template, cfg, x0=None):
    """Same contract as ``engine.run_transient``, computed one cell at a time."""
    u = [[float(v) for v in row] for row in u]
    x = [row[:] for row in u] if x0 is None else [[float(v) for v in row] for row in x0]
    rows, cols = len(u), len(u[0])
    if rows > MAX_SIDE or cols > MAX_SIDE:
        raise ContractError(f"reference oracle is limited to {MAX_SIDE}x{MAX_SIDE} grids")
    if len(x) != rows or len(x[0]) != cols:
        raise ContractError("input and state dimensions differ")

    horizon = template.t_final
    checkpoints = list(cfg.checkpoint_times) or [horizon]
    dt = cfg.dt
    tol = 1e-9 * dt

    outputs, states = [], []
    t = 0.0
    k = 0  # index of the last dt-grid point passed
    for target in sorted(set(checkpoints) | {horizon}):
        while t < target:
            nxt = (k + 1) * dt
            if nxt < target - tol:
                k += 1
            else:
                if nxt <= target + tol:
                    k += 1
                nxt = target
            h = nxt - t
            if cfg.method == "euler":
                x = _axpy(x, h, _rates(x, u, template, cfg, rows, cols))
            else:
                k1 = _rates(x, u, template, cfg, rows, cols)
                k2 = _rates(_axpy(x, 0.5 * h, k1), u, template, cfg, rows, cols)
                k3 = _rates(_axpy(x, 0.5 * h, k2), u, template, cfg, rows, cols)
                k4 = _rates(_axpy(x, h, k3), u, template, cfg, rows, cols)
                x = [
                    [
                        x[i][j] + (h / 6.0) * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j])
                        for j in range(cols)
                    ]
                    for i in range(rows)
                ]
            t = nxt
            for row in x:
                for v in row:
                    if not abs(v) <= cfg.blowup_guard:
                        raise DivergenceError(f"divergent dynamics at t={t:.6g}", time=t)
        if target in checkpoints:
            outputs.append((target, [[_sat(v) for v in row] for row in x]))
            if cfg.record_states:
                states.append([row[:] for row in x])
    # arrays only at the boundary, for interface parity with the engine
    return TransientResult([(t, np.array(y)) for t, y in outputs], np.array(x),
                           [np.array(s) for s in states])
