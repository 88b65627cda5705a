"""Iterative multinomial NUTS core, built twice from one source.

``make_core(jit=True)`` compiles every function with numba; the target is
then a jitted ``logp(theta, args) -> (value, gradient)``.  ``jit=False``
returns the same functions as plain Python for arbitrary callables.

Subtrees are built leaf by leaf.  A stack holds, per level, the completed
left sibling still waiting for its right partner; when a node completes it
is merged with every waiting sibling below it.  This visits merges in the
same post-order as the usual recursive builder, so random draws, U-turn
checks and early stopping happen in the same sequence.
"""
import math

import numpy as np

MAX_DELTA_H = 1000.0

# per-iteration statistics, in column order
ACCEPT, DEPTH, N_LEAPFROG, DIVERGENT, ENERGY, STEPSIZE = range(6)
N_STATS = 6

# init_stepsize status codes
STEPSIZE_OK, STEPSIZE_DIVERGED = 0, 1


def make_core(jit: bool):
    if jit:
        from numba import njit

        decorate = njit(cache=False, error_model="numpy")
    else:
        def decorate(f):
            return f

    @decorate
    def kinetic(p, inv_metric):
        return 0.5 * np.sum(inv_metric * p * p)

    @decorate
    def hamiltonian(lp, g, p, inv_metric):
        h = -lp + kinetic(p, inv_metric)
        if math.isnan(h) or not np.all(np.isfinite(g)):
            return math.inf
        return h

    @decorate
    def leapfrog(logp, args, q, p, g, eps, inv_metric):
        p_half = p + 0.5 * eps * g
        q_new = q + eps * (inv_metric * p_half)
        lp_new, g_new = logp(q_new, args)
        return q_new, p_half + 0.5 * eps * g_new, lp_new, g_new

    @decorate
    def criterion(ps_minus, ps_plus, rho):
        return np.dot(ps_plus, rho) > 0.0 and np.dot(ps_minus, rho) > 0.0

    @decorate
    def transition(logp, args, q, lp, g, inv_metric, eps, max_depth, rng):
        dim = q.size
        p = rng.standard_normal(dim) / np.sqrt(inv_metric)
        H0 = -lp + kinetic(p, inv_metric)

        sq, sp, slp, sg = q, p, lp, g
        fq, fp, flp, fg = q, p, lp, g
        bq, bp, blp, bg = q, p, lp, g
        ps = inv_metric * p
        p_plus, ps_plus, p_minus, ps_minus = p, ps, p, ps
        rho = p.copy()
        log_sum_w = 0.0
        depth = 0
        n_leap = 0
        sum_metro = 0.0
        divergent = False

        # per-level node storage: proposal, log weight, rho, boundary momenta
        n_lev = max_depth + 1
        k_q = np.empty((n_lev, dim))
        k_p = np.empty((n_lev, dim))
        k_g = np.empty((n_lev, dim))
        k_lp = np.empty(n_lev)
        k_lw = np.empty(n_lev)
        k_rho = np.empty((n_lev, dim))
        k_pb = np.empty((n_lev, dim))
        k_psb = np.empty((n_lev, dim))
        k_pe = np.empty((n_lev, dim))
        k_pse = np.empty((n_lev, dim))
        pending = np.zeros(n_lev, dtype=np.bool_)

        while depth < max_depth:
            forward = rng.random() > 0.5
            if forward:
                cq, cp, clp, cg = fq, fp, flp, fg
                step = eps
            else:
                cq, cp, clp, cg = bq, bp, blp, bg
                step = -eps
            pending[:] = False
            valid = True
            for _leaf in range(1 << depth):
                cq, cp, clp, cg = leapfrog(logp, args, cq, cp, cg, step, inv_metric)
                n_leap += 1
                h = hamiltonian(clp, cg, cp, inv_metric)
                if h - H0 > MAX_DELTA_H:
                    divergent = True
                lw = H0 - h
                sum_metro += 1.0 if lw > 0 else math.exp(lw)
                if divergent:
                    valid = False
                    break
                # the new leaf as the current node
                nq, np_, nlp, ng = cq, cp, clp, cg
                n_lw = lw
                n_rho = cp.copy()
                n_pb = cp
                n_psb = inv_metric * cp
                n_pe = n_pb
                n_pse = n_psb
                level = 0
                while pending[level]:
                    pending[level] = False
                    lw_tot = np.logaddexp(k_lw[level], n_lw)
                    if not (n_lw > lw_tot or rng.random() < math.exp(n_lw - lw_tot)):
                        nq, np_, nlp, ng = k_q[level].copy(), k_p[level].copy(), k_lp[level], k_g[level].copy()
                    rho_tot = k_rho[level] + n_rho
                    persist = criterion(k_psb[level], n_pse, rho_tot)
                    persist = criterion(k_psb[level], n_psb, k_rho[level] + n_pb) and persist
                    persist = criterion(k_pse[level], n_pse, n_rho + k_pe[level]) and persist
                    n_lw = lw_tot
                    n_rho = rho_tot
                    n_pb = k_pb[level].copy()
                    n_psb = k_psb[level].copy()
                    level += 1
                    if not persist:
                        valid = False
                        break
                if not valid:
                    break
                k_q[level] = nq
                k_p[level] = np_
                k_g[level] = ng
                k_lp[level] = nlp
                k_lw[level] = n_lw
                k_rho[level] = n_rho
                k_pb[level] = n_pb
                k_psb[level] = n_psb
                k_pe[level] = n_pe
                k_pse[level] = n_pse
                pending[level] = True
            if not valid:
                break

            # merge the new subtree (stored at level `depth`) into the trajectory
            d = depth
            depth += 1
            sub_lw = k_lw[d]
            if sub_lw > log_sum_w or rng.random() < math.exp(sub_lw - log_sum_w):
                sq, sp, slp, sg = k_q[d].copy(), k_p[d].copy(), k_lp[d], k_g[d].copy()
            log_sum_w = np.logaddexp(log_sum_w, sub_lw)
            rho_sub = k_rho[d].copy()
            rho_new = rho + rho_sub
            p_beg, ps_beg = k_pb[d].copy(), k_psb[d].copy()
            p_end, ps_end = k_pe[d].copy(), k_pse[d].copy()
            if forward:
                persist = criterion(ps_minus, ps_end, rho_new)
                persist = criterion(ps_minus, ps_beg, rho + p_beg) and persist
                persist = criterion(ps_plus, ps_end, rho_sub + p_plus) and persist
                p_plus, ps_plus = p_end, ps_end
                fq, fp, flp, fg = cq, cp, clp, cg
            else:
                persist = criterion(ps_end, ps_plus, rho_new)
                persist = criterion(ps_beg, ps_plus, rho + p_beg) and persist
                persist = criterion(ps_end, ps_minus, rho_sub + p_minus) and persist
                p_minus, ps_minus = p_end, ps_end
                bq, bp, blp, bg = cq, cp, clp, cg
            rho = rho_new
            if not persist:
                break

        stats = np.empty(N_STATS)
        stats[ACCEPT] = sum_metro / n_leap
        stats[DEPTH] = depth
        stats[N_LEAPFROG] = n_leap
        stats[DIVERGENT] = 1.0 if divergent else 0.0
        stats[ENERGY] = -slp + kinetic(sp, inv_metric)
        stats[STEPSIZE] = eps
        return sq, slp, sg, stats

    @decorate
    def init_stepsize(logp, args, q, lp, g, inv_metric, eps, rng):
        """Double or halve ``eps`` until one leapfrog step crosses an
        acceptance probability of 0.8.  Returns ``(eps, status)``."""
        log_target = math.log(0.8)
        direction = 0
        while True:
            p = rng.standard_normal(q.size) / np.sqrt(inv_metric)
            H0 = -lp + kinetic(p, inv_metric)
            q1, p1, lp1, g1 = leapfrog(logp, args, q, p, g, eps, inv_metric)
            delta = H0 - hamiltonian(lp1, g1, p1, inv_metric)
            if direction == 0:
                direction = 1 if delta > log_target else -1
                continue
            if direction == 1 and not delta > log_target:
                return eps, STEPSIZE_OK
            if direction == -1 and not delta < log_target:
                return eps, STEPSIZE_OK
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7 or eps < 1e-300:
                return eps, STEPSIZE_DIVERGED

    @decorate
    def run_chain(logp, args, q, lp, g, rng, warmup, samples, window_first, window_last,
                  target_accept, max_depth):
        """Warmup with step-size and diagonal-metric adaptation, then sampling.

        Returns ``(draws, stats, eps, inv_metric, status)``; a non-zero
        status means the step-size search failed.
        """
        dim = q.size
        inv_metric = np.ones(dim)
        draws = np.empty((samples, dim))
        stats = np.empty((samples, N_STATS))
        eps, status = init_stepsize(logp, args, q, lp, g, inv_metric, 1.0, rng)
        if status != STEPSIZE_OK:
            return draws, stats, eps, inv_metric, status

        # dual averaging
        gamma, t0, kappa = 0.05, 10.0, 0.75
        mu = math.log(10.0 * eps)
        counter = 0
        s_bar = 0.0
        x_bar = 0.0

        buf = np.empty((warmup, dim))
        n_buf = 0
        w = 0
        n_windows = window_first.size
        for it in range(warmup):
            q, lp, g, st = transition(logp, args, q, lp, g, inv_metric, eps, max_depth, rng)
            counter += 1
            a = min(1.0, st[ACCEPT])
            eta = 1.0 / (counter + t0)
            s_bar = (1.0 - eta) * s_bar + eta * (target_accept - a)
            x = mu - s_bar * math.sqrt(counter) / gamma
            x_eta = counter ** (-kappa)
            x_bar = (1.0 - x_eta) * x_bar + x_eta * x
            eps = math.exp(x)

            if w < n_windows and it >= window_first[w]:
                buf[n_buf] = q
                n_buf += 1
                if it == window_last[w]:
                    n = float(n_buf)
                    mean = np.zeros(dim)
                    for i in range(n_buf):
                        mean += buf[i]
                    mean /= n
                    var = np.zeros(dim)
                    for i in range(n_buf):
                        r = buf[i] - mean
                        var += r * r
                    var /= n - 1.0
                    inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    n_buf = 0
                    w += 1
                    eps, status = init_stepsize(logp, args, q, lp, g, inv_metric, eps, rng)
                    if status != STEPSIZE_OK:
                        return draws, stats, eps, inv_metric, status
                    mu = math.log(10.0 * eps)
                    counter = 0
                    s_bar = 0.0
                    x_bar = 0.0
        eps = math.exp(x_bar)

        for s in range(samples):
            q, lp, g, st = transition(logp, args, q, lp, g, inv_metric, eps, max_depth, rng)
            draws[s] = q
            stats[s] = st
        return draws, stats, eps, inv_metric, STEPSIZE_OK

    return run_chain


_CORES = {}


def get_core(jit: bool):
    if jit not in _CORES:
        _CORES[jit] = make_core(jit)
    return _CORES[jit]
