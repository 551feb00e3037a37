"""Compiled extension vs pure-Python fallback: selection and parity.

The fallback is forced in a subprocess via NTKADAPT_PURE_PYTHON=1; both
backends must produce bitwise-comparable numerics on the same inputs.
"""

import json
import os
import subprocess
import sys

import numpy as np

import ntkadapt.kernels as kernels

_FINGERPRINT = r"""
import json
import numpy as np
import ntkadapt.kernels as kernels
from ntkadapt.model import init_xavier
from ntkadapt.problems import (GroupLayout, ResidualOp, sample_collocation,
                               wave1d)

spec = wave1d(hidden=(6, 5))
layout = GroupLayout((("D", 4), ("D_i", 2), ("B_i", 2), ("B1", 1),
                      ("B2", 1)))
pts = sample_collocation(spec, layout, 0)
rop = ResidualOp(spec, pts)
theta = init_xavier(spec.model, seed=0).values
r = rop.residual(theta)
jac = rop.jacobian(theta)
cols = rop.jvp_groups(theta, r.values)
print(json.dumps({
    "backend": kernels.BACKEND,
    "residual": r.values.tolist(),
    "jacobian_sum": float(jac.sum()),
    "jacobian_abs_sum": float(np.abs(jac).sum()),
    "grad": cols.sum(axis=1).tolist(),
}))
"""


def _run(pure):
    env = dict(os.environ)
    if pure:
        env["NTKADAPT_PURE_PYTHON"] = "1"
    else:
        env.pop("NTKADAPT_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", _FINGERPRINT], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def test_compiled_backend_is_default():
    assert kernels.BACKEND in ("compiled", "python")
    got = _run(pure=False)
    assert got["backend"] == "compiled"


def test_env_var_selects_pure_python():
    got = _run(pure=True)
    assert got["backend"] == "python"


def test_backends_agree_on_wave_residual_and_gradients():
    a = _run(pure=False)
    b = _run(pure=True)
    ra = np.array(a["residual"])
    rb = np.array(b["residual"])
    assert np.allclose(ra, rb, rtol=1e-13, atol=1e-15)
    assert a["jacobian_sum"] == b["jacobian_sum"] or abs(
        a["jacobian_sum"] - b["jacobian_sum"]) <= 1e-12 * max(
        1.0, abs(b["jacobian_sum"]))
    assert abs(a["jacobian_abs_sum"] - b["jacobian_abs_sum"]) <= 1e-11 * \
        max(1.0, b["jacobian_abs_sum"])
    ga = np.array(a["grad"])
    gb = np.array(b["grad"])
    assert np.allclose(ga, gb, rtol=1e-12, atol=1e-13)
