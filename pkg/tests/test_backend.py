"""Both kernel backends give the same numbers."""
import json
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from mfctmdp import USE_NUMBA, enumerate_lattice, registry_get
from mfctmdp import kernels as K
from mfctmdp.exact import _tensors

SCRIPT = textwrap.dedent(
    """
    import json
    import numpy as np
    from mfctmdp import OpenLoop, backend_name, integrate_limit, monte_carlo_value, policy_evaluation, registry_get, value_iteration
    from mfctmdp.experiments import equivalence_fixture, paper_machine_policy
    from mfctmdp.models import initial_measure

    mr = registry_get("machine_replacement")
    pol = OpenLoop(paper_machine_policy(mr))
    mc = monte_carlo_value(mr, 300, initial_measure(mr), pol, 4, seed=1)
    pe = policy_evaluation(mr, 12, pol).values
    vi = value_iteration(equivalence_fixture(), 6).values
    sir = registry_get("sir_malware")
    from mfctmdp.limit import switch_family
    lim = integrate_limit(sir, initial_measure(sir), switch_family(sir, "one_switch").build([4.0])).value
    print(json.dumps({"backend": backend_name(), "mc": mc.values.tolist(), "pe": pe.tolist(), "vi": vi.tolist(), "lim": lim}))
    """
)


def _run(disable: str) -> dict:
    env = dict(os.environ, MFCTMDP_DISABLE_NUMBA=disable)
    proc = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def test_backends_agree_end_to_end():
    a, b = _run("0"), _run("1")
    assert a["backend"] == "numba" and b["backend"] == "numpy"
    assert a["mc"] == b["mc"]  # identical random streams and arithmetic
    assert np.allclose(a["pe"], b["pe"], rtol=0, atol=1e-12)
    assert np.allclose(a["vi"], b["vi"], rtol=0, atol=1e-10)
    assert a["lim"] == pytest.approx(b["lim"], abs=1e-13)


@pytest.mark.parametrize("name,N", [("machine_replacement", 30), ("sir_malware", 6)])
def test_lattice_sweep_variants_agree(name, N):
    m = registry_get(name)
    lat = enumerate_lattice(N, m.n_states)
    Qs, Rs = _tensors(m, lat)
    v = np.random.default_rng(0).normal(size=lat.size)
    outs = {k: f(Qs, Rs, lat.points, N, lat.successors, m.actions.mask, v) for k, f in K.MAX_GAIN_VARIANTS.items()}
    assert np.allclose(outs["numba"][0], outs["numpy"][0], atol=1e-12)
    assert np.array_equal(outs["numba"][1], outs["numpy"][1])
    Wp = np.broadcast_to(m.actions.dirac(), (lat.size,) + m.actions.mask.shape).copy()
    pg = {k: f(Qs, Rs, lat.points, N, lat.successors, Wp, v) for k, f in K.POLICY_GAIN_VARIANTS.items()}
    assert np.allclose(pg["numba"], pg["numpy"], atol=1e-12)


def test_python_model_uses_interpreted_kernel():
    from conftest import two_action

    m = two_action()
    assert K.select("sim_chunk", m.rates, K.null_feedback) is K.PYTHON.sim_chunk
    if USE_NUMBA:
        mr = registry_get("machine_replacement")
        assert K.select("sim_chunk", mr.rates, K.null_feedback) is K.COMPILED.sim_chunk
