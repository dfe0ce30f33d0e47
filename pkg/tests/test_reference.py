import math

import numpy as np
import pytest

from conftest import random_template
from cnnforge.engine import IntegrationConfig, TemplateSet, run_transient
from cnnforge.errors import ContractError, DivergenceError
from cnnforge.reference import simulate_reference


def test_single_euler_step_of_bias():
    cfg = IntegrationConfig(dt=0.1, method="euler")
    res = simulate_reference(np.zeros((1, 1)), TemplateSet("b", bias=1.0, t_final=0.1), cfg, x0=np.zeros((1, 1)))
    assert res.final_state[0, 0] == pytest.approx(0.1)


def test_zero_template_decay():
    cfg = IntegrationConfig(dt=0.01, method="rk4")
    x0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    res = simulate_reference(np.zeros_like(x0), TemplateSet("z", t_final=2.0), cfg, x0=x0)
    np.testing.assert_allclose(res.final_state, x0 * math.exp(-2.0), atol=1e-9)


@pytest.mark.parametrize("method", ["euler", "rk4"])
@pytest.mark.parametrize("boundary", ["zero", "replicate"])
def test_matches_engine(method, boundary):
    rng = np.random.default_rng(7)
    for i in range(4):
        t = random_template(rng, 1.0, name=f"t{i}", t_final=0.5)
        cfg = IntegrationConfig(dt=0.05, method=method, boundary=boundary, checkpoint_times=(0.2, 0.5))
        u = rng.uniform(-1, 1, (5, 6))
        fast = run_transient(u, t, cfg)
        slow = simulate_reference(u, t, cfg)
        assert fast.times == slow.times
        for (_, a), (_, b) in zip(fast.outputs, slow.outputs):
            assert np.abs(a - b).max() <= 1e-12
        assert np.abs(fast.final_state - slow.final_state).max() <= 1e-12


def test_rejects_large_grids():
    with pytest.raises(ContractError):
        simulate_reference(np.zeros((33, 4)), TemplateSet("z"), IntegrationConfig())


def test_reports_divergence():
    C = np.zeros((3, 3))
    C[1, 1] = 5.0
    with pytest.raises(DivergenceError):
        simulate_reference(np.ones((2, 2)), TemplateSet("g", C=C, t_final=10.0), IntegrationConfig())
