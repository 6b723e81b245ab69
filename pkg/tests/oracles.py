"""Independent reference computations used only by the tests."""

import math

import numpy as np


def project_simplex(v, z):
    """Euclidean projection onto ``{w >= 0, sum w = z}`` (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - z
    ind = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_ball(v, center, radius):
    diff = v - center
    n = np.linalg.norm(diff)
    return v if n <= radius else center + diff * (radius / n)


def dykstra_project(v, m, rho, iters=20000, tol=1e-15):
    """Project ``v`` onto simplex(m) intersected with the ball around 1 by Dykstra."""
    center = np.ones(len(v))
    radius = math.sqrt(rho * m)
    x = v.copy()
    p = np.zeros_like(v)
    q = np.zeros_like(v)
    for _ in range(iters):
        y = project_simplex(x + p, m)
        p = x + p - y
        x_new = project_ball(y + q, center, radius)
        q = y + q - x_new
        if np.max(np.abs(x_new - x)) < tol:
            x = x_new
            break
        x = x_new
    return x


def pgd_weights(d, rho, step=None, iters=50000, tol=1e-13):
    """Projected gradient on ``min d.w`` over the weight set, Dykstra projections."""
    d = np.asarray(d, dtype=float)
    m = len(d)
    dn = d - d.mean()
    scale = np.linalg.norm(dn)
    if scale == 0:
        return np.ones(m)
    dn = dn / scale
    step = step if step is not None else 4.0 * math.sqrt(rho * m)
    w = np.ones(m)
    for _ in range(iters):
        w_new = dykstra_project(w - step * dn, m, rho)
        if np.max(np.abs(w_new - w)) < tol:
            return w_new
        w = w_new
    return w


def reciprocal_affinity_bruteforce(Z, query, K, M):
    """Affinities by explicit loops over cosine distances, self excluded."""
    Zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    n = len(Z)

    def knn(i, k):
        dist = [(1.0 - float(Zn[i] @ Zn[j]), j) for j in range(n) if j != i]
        dist.sort()
        return [j for _, j in dist[:k]]

    out = {}
    for j in query:
        for jp in knn(j, K):
            out[(j, jp)] = 1.0 if j in knn(jp, M) else 0.1
    return out


def central_diff(f, x, eps=1e-5):
    """Central differences of scalar ``f`` wrt every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))
