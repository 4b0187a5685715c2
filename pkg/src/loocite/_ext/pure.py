import numpy as np


def cd_lasso(X, y, lam, max_sweeps=10_000, tol=1e-8):
    """Coordinate descent on ``(1/2n)||y - Xw||^2 + lam * ||w||_1``.

    ``X`` and ``y`` must already be centered (the intercept is handled by
    the caller).  Stops when the largest coefficient change in a sweep is
    at most ``tol`` times the largest coefficient.  Returns the weights,
    the number of sweeps and the objective after each sweep.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    w = np.zeros(d)
    r = y.copy()
    col_sq = (X * X).sum(0) / n
    history = []
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        max_dw = 0.0
        max_w = 0.0
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            xj = X[:, j]
            old = w[j]
            rho = xj @ r / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != old:
                r -= xj * (new - old)
                w[j] = new
            max_dw = max(max_dw, abs(new - old))
            max_w = max(max_w, abs(new))
        history.append(r @ r / (2 * n) + lam * np.abs(w).sum())
        if max_dw <= tol * max_w or max_dw == 0.0:
            break
    return w, sweeps, np.asarray(history)


def grubbs_sequence(values, k):
    """Repeatedly remove the maximum, recording its one-sided Grubbs statistic.

    Returns ``(index, G, N)`` arrays, one entry per removal, where ``N`` is
    the sample size the statistic was computed on.  Stops after ``k``
    removals, when fewer than three values remain, or when the remaining
    values are all equal.
    """
    x = np.asarray(values, dtype=np.float64)
    alive = np.ones(len(x), dtype=bool)
    idx, stat, size = [], [], []
    for _ in range(k):
        rest = x[alive]
        m = len(rest)
        if m < 3 or rest.max() == rest.min():
            break
        mean = rest.mean()
        s = np.sqrt(((rest - mean) ** 2).sum() / (m - 1))
        pos = np.flatnonzero(alive)
        j = int(pos[np.argmax(rest)])
        idx.append(j)
        stat.append((x[j] - mean) / s)
        size.append(m)
        alive[j] = False
    return (np.asarray(idx, dtype=np.int64), np.asarray(stat, dtype=np.float64),
            np.asarray(size, dtype=np.int64))
