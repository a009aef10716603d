"""Compiled inner loop of the projected-gradient OCP solver.

Network weights are passed flat (row-major W then b per layer) together with
the layer widths, so one kernel handles any depth.
"""

import numpy as np
from numba import njit


def flatten_layers(layers):
    sizes = [layers[0][0].shape[1]] + [W.shape[0] for W, _ in layers]
    flat = np.concatenate([np.concatenate([W.ravel(order="C"), b.ravel()]) for W, b in layers])
    return np.ascontiguousarray(flat, dtype=np.float64), np.asarray(sizes, dtype=np.int64)


@njit(cache=True)
def _network_sum_and_grad(X, n_rows, wflat, sizes, grad, need_grad):
    """Sum of network outputs over the first n_rows of X; adds d/dx into grad."""
    n_layers = sizes.shape[0] - 1
    if n_layers == 0:
        return 0.0
    a = np.ascontiguousarray(X[:n_rows])
    acts = [a]
    weights = [np.empty((1, 1))]
    off = 0
    total = 0.0
    for l in range(n_layers):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        W = wflat[off:off + n_out * n_in].reshape((n_out, n_in))
        b = wflat[off + n_out * n_in:off + n_out * n_in + n_out]
        off += n_out * n_in + n_out
        if l == 0:
            weights[0] = W
        else:
            weights.append(W)
        z = np.dot(a, W.T)
        if l < n_layers - 1:
            for i in range(n_rows):
                for j in range(n_out):
                    z[i, j] = np.tanh(z[i, j] + b[j])
            a = z
            acts.append(a)
        else:
            for i in range(n_rows):
                total += z[i, 0] + b[0]
    if not need_grad:
        return total
    w_out = weights[n_layers - 1]
    delta = np.empty((n_rows, w_out.shape[1]))
    for i in range(n_rows):
        delta[i] = w_out[0]
    for l in range(n_layers - 2, -1, -1):
        h = acts[l + 1]
        for i in range(n_rows):
            for j in range(h.shape[1]):
                delta[i, j] *= 1.0 - h[i, j] * h[i, j]
        delta = np.dot(delta, weights[l])
    for i in range(n_rows):
        for k in range(sizes[0]):
            grad[i, k] += delta[i, k]
    return total


@njit(cache=True)
def objective_grad(x0, U, Phi, Gamma, x_d, u_d, q, P_term, r, wflat, sizes, y_d,
                   x_min, x_max, mu, has_box, g_out, need_grad):
    n_x = x0.shape[0]
    n_u = u_d.shape[0]
    N = U.shape[0] // n_u
    Xf = Phi @ x0 + Gamma @ U
    X = Xf.reshape((N + 1, n_x))
    gX = np.zeros((N + 1, n_x))
    f = 0.0
    for i in range(N):
        for k in range(n_x):
            d = X[i, k] - x_d[k]
            f += q[k] * d * d
            gX[i, k] = 2.0 * q[k] * d
    dN = X[N] - x_d
    for a in range(n_x):
        s = 0.0
        for b in range(n_x):
            s += P_term[a, b] * dN[b]
        f += dN[a] * s
        gX[N, a] = 2.0 * s
    for i in range(N):
        for j in range(n_u):
            d = U[i * n_u + j] - u_d[j]
            f += r[j] * d * d
    if sizes.shape[0] > 1:
        f += _network_sum_and_grad(X, N, wflat, sizes, gX, need_grad) - N * y_d
    if has_box:
        for i in range(1, N + 1):
            for k in range(n_x):
                v = X[i, k]
                if v > x_max[k]:
                    e = v - x_max[k]
                    f += mu * e * e
                    gX[i, k] += 2.0 * mu * e
                elif v < x_min[k]:
                    e = x_min[k] - v
                    f += mu * e * e
                    gX[i, k] -= 2.0 * mu * e
    if need_grad:
        g = Gamma.T @ gX.ravel()
        for i in range(N):
            for j in range(n_u):
                idx = i * n_u + j
                g_out[idx] = g[idx] + 2.0 * r[j] * (U[idx] - u_d[j])
    return f


@njit(cache=True)
def _project(U, u_min, u_max):
    n_u = u_min.shape[0]
    out = np.empty_like(U)
    for i in range(U.shape[0]):
        j = i % n_u
        v = U[i]
        if v < u_min[j]:
            v = u_min[j]
        elif v > u_max[j]:
            v = u_max[j]
        out[i] = v
    return out


@njit(cache=True)
def pg_solve(x0, U0, u_min, u_max, Phi, Gamma, x_d, u_d, q, P_term, r, wflat, sizes, y_d,
             x_min, x_max, mu, has_box, alpha0, max_iters, step_tol, armijo_c, backtrack, hist):
    """Projected gradient with Barzilai-Borwein trial steps and Armijo backtracking.

    Returns (U, f, iterations, converged, failed, n_history). ``hist`` receives
    the objective after every accepted iteration (index 0 is the start value).
    """
    n = U0.shape[0]
    U = _project(U0, u_min, u_max)
    g = np.zeros(n)
    g_new = np.zeros(n)
    f = objective_grad(x0, U, Phi, Gamma, x_d, u_d, q, P_term, r, wflat, sizes, y_d,
                       x_min, x_max, mu, has_box, g, True)
    hist[0] = f
    n_hist = 1
    if not np.isfinite(f):
        return U, f, 0, False, True, n_hist
    for k in range(n):
        if not np.isfinite(g[k]):
            return U, f, 0, False, True, n_hist
    alpha = alpha0
    converged = False
    failed = False
    it = 0
    while it < max_iters:
        it += 1
        accepted = False
        step = 0.0
        U_new = U
        d = U
        f_new = f
        while True:
            U_new = _project(U - alpha * g, u_min, u_max)
            d = U_new - U
            step = np.max(np.abs(d))
            if step < step_tol:
                break
            f_new = objective_grad(x0, U_new, Phi, Gamma, x_d, u_d, q, P_term, r, wflat, sizes,
                                   y_d, x_min, x_max, mu, has_box, g_new, True)
            if np.isfinite(f_new) and f_new <= f + armijo_c * np.dot(g, d):
                accepted = True
                break
            alpha *= backtrack
        if not accepted:
            converged = True
            break
        for k in range(n):
            if not np.isfinite(g_new[k]):
                failed = True
        if failed:
            break
        yv = g_new - g
        sy = np.dot(d, yv)
        if sy > 1e-300:
            alpha = np.dot(d, d) / sy
        else:
            alpha = 2.0 * alpha
        alpha = min(max(alpha, 1e-12), 1e12)
        U = U_new
        f = f_new
        g[:] = g_new
        if n_hist < hist.shape[0]:
            hist[n_hist] = f
            n_hist += 1
    return U, f, it, converged, failed, n_hist
