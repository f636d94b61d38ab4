"""Hot chain loops.

Every kernel consumes random numbers drawn beforehand by the caller, so the
compiled and interpreted versions agree bit for bit. Acceptance tests are done
as ``log_u <= log_ratio``; with ``log_u <= 0`` this is the same event as
``u <= min(1, exp(log_ratio))``.
"""
import numpy as np

from ._accel import jit


@jit
def imh_scan(w, log_u, start):
    """Independent Metropolis-Hastings over a fixed sequence of proposals.

    ``w[k]`` is log target minus log proposal at candidate ``k``; step ``n``
    proposes candidate ``n + 1``. Returns the candidate index held after each
    step and the acceptance flags.
    """
    m = log_u.shape[0]
    state = np.empty(m, np.int64)
    accepted = np.empty(m, np.bool_)
    cur = start
    for n in range(m):
        k = n + 1
        if log_u[n] <= w[k] - w[cur]:
            cur = k
            accepted[n] = True
        else:
            accepted[n] = False
        state[n] = cur
    return state, accepted


@jit
def gaussian_logw(x, params):
    """Diagonal Gaussian exponent; ``params = [mean_0..mean_{d-1}, prec_0..prec_{d-1}]``."""
    d = x.shape[0]
    acc = 0.0
    for i in range(d):
        r = x[i] - params[i]
        acc -= 0.5 * params[d + i] * r * r
    return acc


@jit
def rwm_scan(logw, params, x0, scale, eps, log_u):
    """Random-walk Metropolis with a symmetric Gaussian step and a jitted log target."""
    m, d = eps.shape
    out = np.empty((m, d))
    accepted = np.empty(m, np.bool_)
    cur = x0.copy()
    prop = np.empty(d)
    lw_cur = logw(cur, params)
    for n in range(m):
        for i in range(d):
            prop[i] = cur[i] + scale * eps[n, i]
        lw_prop = logw(prop, params)
        if log_u[n] <= lw_prop - lw_cur:
            for i in range(d):
                cur[i] = prop[i]
            lw_cur = lw_prop
            accepted[n] = True
        else:
            accepted[n] = False
        for i in range(d):
            out[n, i] = cur[i]
    return out, accepted


@jit
def grid_coupled_scan(i0, j0, w_c, w_f, props, log_u, values_c, values_f):
    """Coupled IMH on a finite grid for many replicas at once.

    ``props`` and ``log_u`` have shape (steps, replicas). Returns the running
    sum of ``values_f[j] - values_c[i]`` over steps 1..steps for each replica.
    """
    steps, reps = props.shape
    total = np.zeros(reps)
    for r in range(reps):
        i = i0[r]
        j = j0[r]
        acc = 0.0
        for n in range(steps):
            k = props[n, r]
            lu = log_u[n, r]
            if lu <= w_c[k] - w_c[i]:
                i = k
            if lu <= w_f[k] - w_f[j]:
                j = k
            acc += values_f[j] - values_c[i]
        total[r] = acc
    return total
