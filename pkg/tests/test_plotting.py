import numpy as np
import pytest

from stochquant.plotting import render

q = np.linspace(-3, 3, 40)
g = np.exp(-q * q) / np.sqrt(np.pi)

SPECS = {
    "deviation": {"hist": {"lambda": [1.0] * 3, "bin_lo": [0, 1, 2], "bin_hi": [1, 2, 3],
                           "exponential": [0.8, 0.1, 0.01], "empirical": [0.79, 0.11, 0.01]}},
    "born": {"times": [0.0], "density": {"q": q, "density_t0": g, "histogram_t0": g}},
    "scaling": {"dt": [1e-4, 1e-3, 1e-2], "rms": [0.01, 0.03, 0.1], "prefactor": 1.0,
                "exponent": 0.5},
    "classical": {"paths": {"t": q, "classical_q": np.cos(q), "mean_q_0.1": np.cos(q)}},
    "balance": {"profile": {"q": q, "residual_0.001": 1e-7 * g}},
    "uncertainty": {"rows": {"product": [0.5], "stat_err": [0.01], "fisher_bound": [0.5],
                             "case": ["ground"], "t": [0.0]}},
    "locality": {"times": [0.5, 1.0], "ks": [0.01, 0.012], "band": 0.023},
}


@pytest.mark.parametrize("kind", sorted(SPECS))
def test_render_each_kind(kind, tmp_path):
    out = render({"kind": kind, "data": SPECS[kind]}, tmp_path / f"{kind}.png")
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_unknown_kind(tmp_path):
    with pytest.raises(KeyError):
        render({"kind": "movie", "data": {}}, tmp_path / "x.png")
