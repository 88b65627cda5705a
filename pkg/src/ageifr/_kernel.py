"""Compiled log-posterior and gradient for :class:`ageifr.model.Model`.

Loop-level transcription of ``Model._evaluate_numpy``; the two are kept in
agreement by the test-suite.  All inputs are plain arrays and scalars
prepared once by the model.
"""
import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)

# exp by Cody-Waite reduction and a degree-13 Taylor polynomial on
# |r| <= ln(2)/2; written as plain arithmetic so LLVM vectorises the loop
_LOG2E = 1.4426950408889634
_LN2_HI = 0.693147180369123816490
_LN2_LO = 1.90821492927058770002e-10
_EXP_MAX = 709.782712893384
_EXP_MIN = -745.2
_C = tuple(1.0 / math.factorial(i) for i in range(14))


@njit(cache=True, fastmath={"contract"})
def vexp(x):
    """Elementwise ``exp`` of a 1-d array, within 1 ulp of libm."""
    n = x.size
    out = np.empty(n)
    kb = np.empty(n, dtype=np.int64)
    for i in range(n):
        xi = min(max(x[i], _EXP_MIN), _EXP_MAX)
        k = math.floor(xi * _LOG2E + 0.5)
        r = xi - k * _LN2_HI - k * _LN2_LO
        p = _C[13]
        p = p * r + _C[12]
        p = p * r + _C[11]
        p = p * r + _C[10]
        p = p * r + _C[9]
        p = p * r + _C[8]
        p = p * r + _C[7]
        p = p * r + _C[6]
        p = p * r + _C[5]
        p = p * r + _C[4]
        p = p * r + _C[3]
        p = p * r + _C[2]
        p = p * r + _C[1]
        out[i] = p * r + _C[0]
        kb[i] = np.int64(k)
    # 2**k as a product of two normal powers of two, built from exponent bits
    b1 = np.empty(n, dtype=np.int64)
    b2 = np.empty(n, dtype=np.int64)
    for i in range(n):
        k1 = kb[i] >> 1
        b1[i] = (k1 + 1023) << 52
        b2[i] = (kb[i] - k1 + 1023) << 52
    f1 = b1.view(np.float64)
    f2 = b2.view(np.float64)
    for i in range(n):
        v = out[i] * f1[i] * f2[i]
        if x[i] > _EXP_MAX:
            v = np.inf
        elif x[i] < _EXP_MIN:
            v = 0.0
        out[i] = v
    return out


@njit(cache=True, error_model="numpy")
def _log_expit(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True, error_model="numpy")
def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, error_model="numpy", fastmath={"contract", "reassoc"})
def log_density(
    theta,
    # layout
    template, template_c, free_index, free_code, free_stored, dims, offsets,
    loc_country, priors, families,
    # nodes
    seg, Zt, Xt,
    # serology
    s_node, s_bin, s_w, s_n, s_r, s_test, s_const,
    # deaths
    d_node, d_bin, d_w, d_d, d_pop, d_const,
    # validation
    v_n_sens, v_x_sens, v_c_sens, v_n_spec, v_x_spec, v_c_spec,
):
    L, C, T, p1, q1, non_centered = dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]
    o_gamma, o_beta, o_bg, o_bc = offsets[0], offsets[1], offsets[2], offsets[3]
    o_sig, o_sc, o_sens, o_spec = offsets[4], offsets[5], offsets[6], offsets[7]
    gi_mean, gi_sd, gs_sd, bg_mean, bg_sd = priors[0], priors[1], priors[2], priors[3], priors[4]
    sig_scale, sc_scale = priors[5], priors[6]
    sens_a, sens_b, spec_a, spec_b = priors[7], priors[8], priors[9], priors[10]
    betaln_sens, betaln_spec = priors[11], priors[12]
    gi_fam, gs_fam, bi_fam, bs_fam = families[0], families[1], families[2], families[3]

    n_stored = template.size
    nat = template.copy()
    comp = template_c.copy()
    logjac = 0.0
    for i in range(theta.size):
        j = free_index[i]
        u = theta[i]
        c = free_code[i]
        if c == 0:
            nat[j] = u
        elif c == 1:
            nat[j] = math.exp(u)
            logjac += u
        else:
            nat[j] = _expit(u)
            comp[j] = _expit(-u)
            logjac += _log_expit(u) + _log_expit(-u)

    sc = nat[o_sc]
    beta = np.empty((L, q1))
    for l in range(L):
        for i in range(q1):
            raw = nat[o_beta + l * q1 + i]
            if non_centered:
                b = nat[o_bg + i] + nat[o_sig + i] * raw
                if i == 0:
                    b += sc * nat[o_bc + loc_country[l]]
                beta[l, i] = b
            else:
                beta[l, i] = raw

    K = seg[L]
    nz = p1 - 1
    nx = q1 - 1
    has_death = d_d.size > 0
    # linear predictors per location segment (basis stored transposed so
    # the inner loops run over contiguous nodes)
    lin = np.empty(2 * K if has_death else K)
    for l in range(L):
        a, b = seg[l], seg[l + 1]
        j0 = o_gamma + l * p1
        c0 = nat[j0]
        for k in range(a, b):
            lin[k] = c0
        for j in range(nz):
            c = nat[j0 + 1 + j]
            for k in range(a, b):
                lin[k] += c * Zt[j, k]
        if has_death:
            c0 = beta[l, 0]
            for k in range(a, b):
                lin[K + k] = c0
            for i in range(nx):
                c = beta[l, 1 + i]
                for k in range(a, b):
                    lin[K + k] += c * Xt[i, k]
    # exp(-|eta|) for the prevalence, exp(log ifr) for the fatality rate
    neg = np.empty(lin.size)
    for k in range(K):
        neg[k] = -abs(lin[k])
    for k in range(K, lin.size):
        neg[k] = lin[k]
    ex = vexp(neg)
    pi = np.empty(K)
    for k in range(K):
        t = ex[k]
        pi[k] = 1.0 / (1.0 + t) if lin[k] >= 0 else t / (1.0 + t)
    ifr = ex[K:]

    g_nat = np.zeros(n_stored)
    g_beta = np.zeros((L, q1))
    g_pi = np.zeros(K)

    # serology: binomial in bin-averaged positivity
    ll_sero = 0.0
    B = s_n.size
    if B > 0:
        pbar = np.zeros(B)
        for e in range(s_node.size):
            pbar[s_bin[e]] += s_w[e] * pi[s_node[e]]
        h = np.empty(B)
        for b in range(B):
            t = s_test[b]
            sens = nat[o_sens + t]
            sens_c = comp[o_sens + t]
            spec = nat[o_spec + t]
            spec_c = comp[o_spec + t]
            pb = pbar[b]
            p = spec_c * (1.0 - pb) + sens * pb
            q = spec * (1.0 - pb) + sens_c * pb
            r = s_r[b]
            m = s_n[b] - r
            gp = 0.0
            if r > 0:
                ll_sero += r * math.log(p)
                gp += r / p
            if m > 0:
                ll_sero += m * math.log(q)
                gp -= m / q
            g_nat[o_sens + t] += gp * pb
            g_nat[o_spec + t] += gp * (pb - 1.0)
            h[b] = gp * (sens - spec_c)
        for e in range(s_node.size):
            g_pi[s_node[e]] += s_w[e] * h[s_bin[e]]
        ll_sero += s_const

    # deaths: Poisson in population times bin-averaged death rate
    ll_death = 0.0
    g_v = np.zeros(K)
    if has_death:
        Bd = d_d.size
        lam = np.zeros(Bd)
        for e in range(d_node.size):
            k = d_node[e]
            lam[d_bin[e]] += d_w[e] * pi[k] * ifr[k]
        rb = np.empty(Bd)
        for b in range(Bd):
            mu = d_pop[b] * lam[b]
            d = d_d[b]
            if d > 0:
                ll_death += d * math.log(mu)
                rb[b] = d / lam[b] - d_pop[b]
            else:
                rb[b] = -d_pop[b]
            ll_death -= mu
        for e in range(d_node.size):
            g_v[d_node[e]] += d_w[e] * rb[d_bin[e]]
        ll_death += d_const

    g_eta = np.empty(K)
    sl = np.empty(K)
    for k in range(K):
        pk = pi[k]
        g_eta[k] = g_pi[k] * pk * (1.0 - pk)
    if has_death:
        for k in range(K):
            pk = pi[k]
            sl[k] = g_v[k] * pk * ifr[k]
            g_eta[k] += sl[k] * (1.0 - pk)
    for l in range(L):
        a, b = seg[l], seg[l + 1]
        j0 = o_gamma + l * p1
        acc = 0.0
        for k in range(a, b):
            acc += g_eta[k]
        g_nat[j0] += acc
        for j in range(nz):
            acc = 0.0
            for k in range(a, b):
                acc += Zt[j, k] * g_eta[k]
            g_nat[j0 + 1 + j] += acc
        if has_death:
            acc = 0.0
            for k in range(a, b):
                acc += sl[k]
            g_beta[l, 0] += acc
            for i in range(nx):
                acc = 0.0
                for k in range(a, b):
                    acc += Xt[i, k] * sl[k]
                g_beta[l, 1 + i] += acc

    # validation counts
    ll_val = 0.0
    lp = 0.0
    for t in range(T):
        if free_stored[o_sens + t]:
            s = nat[o_sens + t]
            s_c = comp[o_sens + t]
            x = v_x_sens[t]
            m = v_n_sens[t] - x
            g = 0.0
            if x > 0:
                ll_val += x * math.log(s)
                g += x / s
            if m > 0:
                ll_val += m * math.log(s_c)
                g -= m / s_c
            ll_val += v_c_sens[t]
            if sens_a != 1.0:
                lp += (sens_a - 1.0) * math.log(s)
                g += (sens_a - 1.0) / s
            if sens_b != 1.0:
                lp += (sens_b - 1.0) * math.log(s_c)
                g -= (sens_b - 1.0) / s_c
            lp -= betaln_sens
            g_nat[o_sens + t] += g
        if free_stored[o_spec + t]:
            s = nat[o_spec + t]
            s_c = comp[o_spec + t]
            x = v_x_spec[t]
            m = v_n_spec[t] - x
            g = 0.0
            if x > 0:
                ll_val += x * math.log(s)
                g += x / s
            if m > 0:
                ll_val += m * math.log(s_c)
                g -= m / s_c
            ll_val += v_c_spec[t]
            if spec_a != 1.0:
                lp += (spec_a - 1.0) * math.log(s)
                g += (spec_a - 1.0) / s
            if spec_b != 1.0:
                lp += (spec_b - 1.0) * math.log(s_c)
                g -= (spec_b - 1.0) / s_c
            lp -= betaln_spec
            g_nat[o_spec + t] += g

    # seroprevalence coefficient priors
    for l in range(L):
        j0 = o_gamma + l * p1
        if free_stored[j0]:
            g0 = nat[j0]
            if gi_fam == 0:
                z = (g0 - gi_mean) / gi_sd
                lp += -0.5 * z * z - math.log(gi_sd) - 0.5 * LOG_2PI
                g_nat[j0] -= z / gi_sd
            elif gi_fam == 1:
                lp += _log_expit(g0) + _log_expit(-g0)
                g_nat[j0] += 1.0 - 2.0 * _expit(g0)
        if gs_fam == 0:
            for j in range(1, p1):
                if free_stored[j0 + j]:
                    z = nat[j0 + j] / gs_sd
                    lp += -0.5 * z * z - math.log(gs_sd) - 0.5 * LOG_2PI
                    g_nat[j0 + j] -= z / gs_sd

    for i in range(q1):
        if free_stored[o_bg + i]:
            z = (nat[o_bg + i] - bg_mean) / bg_sd
            lp += -0.5 * z * z - math.log(bg_sd) - 0.5 * LOG_2PI
            g_nat[o_bg + i] -= z / bg_sd
        if free_stored[o_sig + i]:
            s = nat[o_sig + i]
            z = s / sig_scale
            lp += LOG_2 - 0.5 * z * z - math.log(sig_scale) - 0.5 * LOG_2PI
            g_nat[o_sig + i] -= z / sig_scale
    if free_stored[o_sc]:
        z = sc / sc_scale
        lp += LOG_2 - 0.5 * z * z - math.log(sc_scale) - 0.5 * LOG_2PI
        g_nat[o_sc] -= z / sc_scale

    # IFR hierarchy
    if non_centered:
        for l in range(L):
            for i in range(q1):
                j = o_beta + l * q1 + i
                raw = nat[j]
                gb = g_beta[l, i]
                lp += -0.5 * raw * raw - 0.5 * LOG_2PI
                g_nat[j] += nat[o_sig + i] * gb - raw
                g_nat[o_bg + i] += gb
                g_nat[o_sig + i] += raw * gb
                if i == 0:
                    jc = o_bc + loc_country[l]
                    g_nat[jc] += sc * gb
                    g_nat[o_sc] += nat[jc] * gb
        for c in range(C):
            raw = nat[o_bc + c]
            lp += -0.5 * raw * raw - 0.5 * LOG_2PI
            g_nat[o_bc + c] -= raw
    else:
        for l in range(L):
            for i in range(q1):
                j = o_beta + l * q1 + i
                b = nat[j]
                fam = bi_fam if i == 0 else bs_fam
                if fam == 0:
                    mean = nat[o_bg + i]
                    if i == 0:
                        mean += nat[o_bc + loc_country[l]]
                    sd = nat[o_sig + i]
                    r = b - mean
                    lp += -0.5 * (r / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI
                    z = r / (sd * sd)
                    g_beta[l, i] -= z
                    g_nat[o_bg + i] += z
                    if i == 0:
                        g_nat[o_bc + loc_country[l]] += z
                    g_nat[o_sig + i] += r * r / (sd * sd * sd) - 1.0 / sd
                elif i == 0 and fam == 1:
                    lp += b
                    g_beta[l, i] += 1.0
                g_nat[j] += g_beta[l, i]
        for c in range(C):
            b = nat[o_bc + c]
            lp += -0.5 * (b / sc) ** 2 - math.log(sc) - 0.5 * LOG_2PI
            g_nat[o_bc + c] -= b / (sc * sc)
            g_nat[o_sc] += b * b / (sc * sc * sc) - 1.0 / sc

    grad = np.empty(theta.size)
    for i in range(theta.size):
        j = free_index[i]
        c = free_code[i]
        if c == 0:
            grad[i] = g_nat[j]
        elif c == 1:
            grad[i] = g_nat[j] * nat[j] + 1.0
        else:
            grad[i] = g_nat[j] * nat[j] * comp[j] + (comp[j] - nat[j])

    terms = np.empty(5)
    terms[0] = ll_sero
    terms[1] = ll_death
    terms[2] = ll_val
    terms[3] = lp
    terms[4] = logjac
    value = ll_sero + ll_death + ll_val + lp + logjac
    if not math.isfinite(value):
        value = -np.inf
    return value, grad, terms


@njit(cache=True, error_model="numpy")
def value_and_grad(theta, args):
    """``(value, gradient)`` with the model's data packed in ``args``."""
    value, grad, _ = log_density(theta, *args)
    return value, grad
