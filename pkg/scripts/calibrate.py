"""Compute the frozen constants stored in ``stefan_lab.constants``.

Run once; paste the printed values into the constants module.  Each tolerance
is twice the calibrated value so acceptance runs at default resolution have
headroom for discretisation differences.
"""

from __future__ import annotations

import argparse
import json
import math
import time

import numpy as np

from stefan_lab.modulation_dynamics import integrate, melt_k0_state, melt_rate_extract
from stefan_lab.spectral_operator import eigenvalues, spectral_gap_test
from stefan_lab.weighted_basis import gram_matrix
from stefan_lab.stefan_solver import init_profile, make_radial_grid, run

B_LIST = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


def scaled_remainders(n: int) -> np.ndarray:
    out = np.empty((len(B_LIST), 3))
    for i, b in enumerate(B_LIST):
        lam = eigenvalues(b, 3, n=n)
        L = abs(math.log(b))
        for k in range(3):
            out[i, k] = (lam[k] - 2 * k - 2 / L) * L * L
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=16000)
    args = ap.parse_args()
    t0 = time.time()
    r = scaled_remainders(args.n)
    centre = 0.5 * (r.max() + r.min())
    half = r.max() - r.min()  # twice the calibrated half spread
    gap = {}
    for k in (0, 1):
        g = spectral_gap_test(1e-4, k, trials=200)
        L = abs(math.log(1e-4))
        gap[k] = float((2 * k + 2 - g.min_quotient) * L)
    gram = max(float(np.max(np.abs(gram_matrix(8, b) - np.eye(9)))) / b
               for b in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6))
    st = melt_k0_state(0.05)
    tr = integrate("melt", 0, st, st.s * 1e6, tol=1e-12, per_decade=400)
    fit = melt_rate_extract(tr)
    g = make_radial_grid()
    prof = init_profile(lambda y: (y - 1) * np.exp(-(y - 1) ** 2), g)
    res = run(prof, 1e-3, t_end=1.0, every=10**9)
    c = res.column("conserved")
    drift = abs(c[-1] - c[0])
    out = {
        "n": args.n,
        "remainders": r.tolist(),
        "EXPANSION_BAND_CENTRE": centre,
        "EXPANSION_BAND_HALF_WIDTH": half,
        "gap_calibration": gap,
        "C_GAP": max(0.0, max(gap.values())),
        "GRAM_CALIBRATION": gram,
        "GRAM_C": 2 * gram,
        "R_TV_CALIBRATION": fit.variation,
        "R_TV_MAX": 2 * fit.variation,
        "CONSERVATION_DRIFT_CALIBRATION": drift,
        "CONSERVATION_TOL": 2 * drift,
        "seconds": time.time() - t0,
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
