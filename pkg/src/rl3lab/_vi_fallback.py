"""Pure-numpy finite-horizon value iteration; same contract as the compiled kernel."""

import numpy as np


def finite_horizon_vi(T, R, terminal, horizon, tol):
    n, A = R.shape
    Q = np.zeros((n, A))
    V = np.zeros(n)
    live = ~np.asarray(terminal, dtype=bool)
    residual = 0.0
    sweeps = 0
    for k in range(horizon):
        Qn = np.zeros((n, A))
        Qn[live] = R[live] + T[live] @ V
        residual = float(np.abs(Qn - Q).max()) if Qn.size else 0.0
        Q = Qn
        V = Q.max(axis=1)
        sweeps = k + 1
        if residual < tol:
            break
    return Q, sweeps, residual
