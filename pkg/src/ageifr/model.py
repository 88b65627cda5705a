"""Joint seroprevalence / IFR model: parameters, log-posterior, simulation.

Serology counts are binomial in the bin-averaged test positivity, control
counts are binomial in the test sensitivity/specificity, and death counts
are Poisson with mean ``N_b * Lambda_b`` where ``Lambda_b`` is the
density-weighted bin average of ``prevalence(a) * ifr(a)``.  Both curves are
linear in a natural spline of age, on the logit and log scale respectively.
IFR coefficients are pooled across locations (and the intercept across
countries) through normal hierarchies.

Bin averages use the trapezoid rule on a regular mesh.  Every mesh node
of a location is evaluated once; bin averages are scatter-adds over the
(node, bin, weight) triples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np
from scipy.special import betaln, expit, gammaln, log_expit, xlogy

from . import _kernel
from .age_density import DEFAULT_SPAN, AgeDensity, dataset_densities
from .data import (
    DeathBinObs,
    SerologyBinObs,
    StudyDataset,
    TestValidation,
)
from .errors import ConfigError, NonFinite, ZeroMassBin
from .quadrature import QuadratureMesh, trapezoid_weights
from .splines import IFR_SPLINE, SEROLOGY_SPLINE, NaturalSplineDef

LOG_2PI = math.log(2.0 * math.pi)

IDENTITY, LOG, LOGIT = 0, 1, 2
TERM_NAMES = ("serology", "deaths", "validation", "prior", "jacobian")


# ---------------------------------------------------------------------------
# scalar densities (also used directly by tests)

def normal_logpdf(x, mean, sd):
    z = (np.asarray(x, dtype=float) - mean) / sd
    return -0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI


def half_normal_logpdf(x, scale):
    x = np.asarray(x, dtype=float)
    out = math.log(2.0) + normal_logpdf(x, 0.0, scale)
    return np.where(x >= 0, out, -np.inf)


def beta_logpdf(x, a, b):
    x = np.asarray(x, dtype=float)
    return xlogy(a - 1.0, x) + xlogy(b - 1.0, 1.0 - x) - betaln(a, b)


def positivity(prevalence, sens, spec):
    """Expected fraction of positive tests given true prevalence."""
    prevalence = np.asarray(prevalence, dtype=float)
    return prevalence * sens + (1.0 - prevalence) * (1.0 - spec)


# ---------------------------------------------------------------------------
# configuration

GAMMA_INTERCEPT_FAMILIES = ("normal", "uniform_prevalence", "flat")
GAMMA_SPLINE_FAMILIES = ("normal", "flat")
BETA_INTERCEPT_FAMILIES = ("hierarchical", "uniform_rate", "flat")
BETA_SPLINE_FAMILIES = ("hierarchical", "flat")


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters.  Every normal scale is a standard deviation.

    The ``*_family`` switches replace a block's default prior.
    ``uniform_prevalence`` is flat on ``expit(gamma_0)``; ``uniform_rate`` is
    flat on ``exp(beta_0)``.  Non-default ``beta_*`` families need the
    centred parameterisation.
    """

    gamma_intercept_mean: float = -1.0
    gamma_intercept_sd: float = 1.5
    gamma_spline_sd: float = 0.05
    beta_global_mean: float = 0.0
    beta_global_sd: float = 5.0
    sigma_scale: float = 2.0
    sigma_country_scale: float = 2.0
    sens_alpha: float = 10.0
    sens_beta: float = 1.0
    spec_alpha: float = 50.0
    spec_beta: float = 1.0
    gamma_intercept_family: str = "normal"
    gamma_spline_family: str = "normal"
    beta_intercept_family: str = "hierarchical"
    beta_spline_family: str = "hierarchical"

    def __post_init__(self):
        for name in ("gamma_intercept_sd", "gamma_spline_sd", "beta_global_sd", "sigma_scale",
                     "sigma_country_scale", "sens_alpha", "sens_beta", "spec_alpha", "spec_beta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"must be positive, got {getattr(self, name)!r}",
                                  field=f"priors.{name}")
        for name, allowed in (("gamma_intercept_family", GAMMA_INTERCEPT_FAMILIES),
                              ("gamma_spline_family", GAMMA_SPLINE_FAMILIES),
                              ("beta_intercept_family", BETA_INTERCEPT_FAMILIES),
                              ("beta_spline_family", BETA_SPLINE_FAMILIES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"must be one of {allowed}, got {getattr(self, name)!r}",
                                  field=f"priors.{name}")


def _spline_from_dict(d, name: str) -> NaturalSplineDef:
    try:
        boundary = tuple(float(k) for k in d["boundary"])
        internal = tuple(float(k) for k in d.get("internal", ()))
    except (KeyError, TypeError, ValueError):
        raise ConfigError("expected {'boundary': [lo, hi], 'internal': [...]}", field=name) from None
    if len(boundary) != 2:
        raise ConfigError("boundary needs exactly two knots", field=name)
    if any(not 0.0 <= k <= 100.0 for k in boundary + internal):
        raise ConfigError(f"knots must lie in [0, 100], got {list(boundary + internal)}", field=name)
    try:
        return NaturalSplineDef(boundary, internal)
    except ValueError as exc:
        raise ConfigError(str(exc), field=name) from None


@dataclass(frozen=True)
class ModelSpec:
    serology_spline: NaturalSplineDef = SEROLOGY_SPLINE
    ifr_spline: NaturalSplineDef = IFR_SPLINE
    priors: PriorSpec = field(default_factory=PriorSpec)
    mesh_step: float = 0.25
    non_centered: bool = True
    loess_span: float = DEFAULT_SPAN
    include_serology: bool = True
    include_deaths: bool = True
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mesh_step > 0:
            raise ConfigError(f"must be positive, got {self.mesh_step!r}", field="mesh_step")
        if not self.loess_span > 0:
            raise ConfigError(f"must be positive, got {self.loess_span!r}", field="loess_span")
        if self.non_centered and (self.priors.beta_intercept_family != "hierarchical"
                                  or self.priors.beta_spline_family != "hierarchical"):
            raise ConfigError("non-hierarchical beta priors need non_centered = false",
                              field="priors.beta_intercept_family")

    @property
    def mesh(self) -> QuadratureMesh:
        return QuadratureMesh(self.mesh_step)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {"serology_knots", "ifr_knots", "priors", "mesh_step", "non_centered",
                 "loess_span", "include_serology", "include_deaths", "fixed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)}", field="model")
        kwargs = {}
        if "serology_knots" in d:
            kwargs["serology_spline"] = _spline_from_dict(d["serology_knots"], "serology_knots")
        if "ifr_knots" in d:
            kwargs["ifr_spline"] = _spline_from_dict(d["ifr_knots"], "ifr_knots")
        if "priors" in d:
            names = {f.name for f in fields(PriorSpec)}
            bad = set(d["priors"]) - names
            if bad:
                raise ConfigError(f"unknown prior key(s) {sorted(bad)}", field="priors")
            kwargs["priors"] = PriorSpec(**d["priors"])
        for key in ("mesh_step", "loess_span"):
            if key in d:
                kwargs[key] = float(d[key])
        for key in ("non_centered", "include_serology", "include_deaths"):
            if key in d:
                kwargs[key] = bool(d[key])
        if "fixed" in d:
            kwargs["fixed"] = {str(k): float(v) for k, v in d["fixed"].items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        s, f = self.serology_spline, self.ifr_spline
        return {
            "serology_knots": {"boundary": list(s.boundary_knots), "internal": list(s.internal_knots)},
            "ifr_knots": {"boundary": list(f.boundary_knots), "internal": list(f.internal_knots)},
            "priors": {fl.name: getattr(self.priors, fl.name) for fl in fields(PriorSpec)},
            "mesh_step": self.mesh_step,
            "non_centered": self.non_centered,
            "loess_span": self.loess_span,
            "include_serology": self.include_serology,
            "include_deaths": self.include_deaths,
            "fixed": dict(self.fixed),
        }


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Parameters:
    """Natural-scale parameter values.

    ``gamma[l]`` holds the seroprevalence intercept followed by the spline
    coefficients of location ``l``; ``beta[l]`` likewise for log-IFR.
    """

    gamma: np.ndarray
    beta: np.ndarray
    beta_global: np.ndarray
    beta_country: np.ndarray
    sigma: np.ndarray
    sigma_country: float
    sens: np.ndarray
    spec: np.ndarray
    location_ids: tuple[str, ...] = ()
    country_ids: tuple[str, ...] = ()
    test_ids: tuple[str, ...] = ()

    def location_index(self, location) -> int:
        if isinstance(location, (int, np.integer)):
            return int(location)
        return self.location_ids.index(location)

    def to_dict(self) -> dict:
        return {
            "gamma": {l: self.gamma[i].tolist() for i, l in enumerate(self.location_ids)},
            "beta": {l: self.beta[i].tolist() for i, l in enumerate(self.location_ids)},
            "beta_global": np.asarray(self.beta_global).tolist(),
            "beta_country": {c: float(self.beta_country[i]) for i, c in enumerate(self.country_ids)},
            "sigma": np.asarray(self.sigma).tolist(),
            "sigma_country": float(self.sigma_country),
            "sens": {t: float(self.sens[i]) for i, t in enumerate(self.test_ids)},
            "spec": {t: float(self.spec[i]) for i, t in enumerate(self.test_ids)},
        }


def prevalence_curve(params: Parameters, location, age, spline: NaturalSplineDef = SEROLOGY_SPLINE):
    """Seroprevalence ``expit(gamma_0 + z(age) . gamma)`` at one location."""
    g = params.gamma[params.location_index(location)]
    eta = g[0] + spline.evaluate(age) @ g[1:]
    out = expit(eta)
    return out[0] if np.ndim(age) == 0 else out


def ifr_curve(params: Parameters, location, age, spline: NaturalSplineDef = IFR_SPLINE):
    """Infection fatality rate ``exp(beta_0 + x(age) . beta)`` at one location."""
    b = params.beta[params.location_index(location)]
    out = np.exp(b[0] + spline.evaluate(age) @ b[1:])
    return out[0] if np.ndim(age) == 0 else out


@dataclass(frozen=True)
class LogDensityResult:
    value: float
    gradient: np.ndarray
    terms: Mapping[str, float] = field(default_factory=dict)


class _BinQuadrature:
    """Scatter/gather structure for density-weighted bin averages."""

    def __init__(self, node, bin_, weight, n_bins):
        self.node = np.asarray(node, dtype=np.intp)
        self.bin = np.asarray(bin_, dtype=np.intp)
        self.weight = np.asarray(weight, dtype=float)
        self.n_bins = n_bins

    def average(self, values):
        return np.bincount(self.bin, weights=self.weight * values[self.node], minlength=self.n_bins)

    def adjoint(self, bin_grad, n_nodes):
        return np.bincount(self.node, weights=self.weight * bin_grad[self.bin], minlength=n_nodes)


class Model:
    """Log-posterior of the joint model on an unconstrained free vector.

    The stored parameter vector, on its natural scale, is laid out in blocks
    ``gamma | beta | beta_global | beta_country | sigma | sigma_country |
    sens | spec``.  Under the non-centred parameterisation the ``beta`` and
    ``beta_country`` blocks hold standard-normal offsets (named ``beta_raw``
    and ``beta_country_raw``).  ``sigma`` entries are sampled on the log
    scale, ``sens``/``spec`` on the logit scale.  Entries listed in
    ``spec.fixed`` are held at the given natural-scale value.
    """

    def __init__(self, dataset: StudyDataset, spec: ModelSpec | None = None,
                 densities: Mapping[str, AgeDensity] | None = None):
        self.dataset = dataset
        self.spec = spec = spec or ModelSpec()
        self.densities = dict(densities) if densities is not None else dataset_densities(
            dataset, span=spec.loess_span)

        self.location_ids = dataset.location_ids
        self.country_ids = dataset.country_ids
        self.test_ids = dataset.test_ids
        L, C, T = len(self.location_ids), len(self.country_ids), len(self.test_ids)
        p1 = spec.serology_spline.dim + 1
        q1 = spec.ifr_spline.dim + 1
        self.shape = (L, C, T, p1, q1)
        self.loc_country = np.array([self.country_ids.index(l.country_id) for l in dataset.locations],
                                    dtype=np.intp)
        self.loc_test = np.array([self.test_ids.index(l.test_id) for l in dataset.locations],
                                 dtype=np.intp)

        self._build_layout()
        self._build_fixed()
        self._build_data()

    # -- layout -------------------------------------------------------------

    def _build_layout(self):
        L, C, T, p1, q1 = self.shape
        nc = self.spec.non_centered
        beta_name = "beta_raw" if nc else "beta"
        country_name = "beta_country_raw" if nc else "beta_country"
        blocks = [
            ("gamma", L * p1, IDENTITY, [f"gamma[{l},{j}]" for l in self.location_ids for j in range(p1)]),
            ("beta", L * q1, IDENTITY, [f"{beta_name}[{l},{i}]" for l in self.location_ids for i in range(q1)]),
            ("beta_global", q1, IDENTITY, [f"beta_global[{i}]" for i in range(q1)]),
            ("beta_country", C, IDENTITY, [f"{country_name}[{c}]" for c in self.country_ids]),
            ("sigma", q1, LOG, [f"sigma[{i}]" for i in range(q1)]),
            ("sigma_country", 1, LOG, ["sigma_country"]),
            ("sens", T, LOGIT, [f"sens[{t}]" for t in self.test_ids]),
            ("spec", T, LOGIT, [f"spec[{t}]" for t in self.test_ids]),
        ]
        self.slices = {}
        names, codes = [], []
        start = 0
        for key, size, code, block_names in blocks:
            self.slices[key] = slice(start, start + size)
            start += size
            names.extend(block_names)
            codes.extend([code] * size)
        self.stored_names = tuple(names)
        self.transforms = np.array(codes, dtype=np.int8)
        self.n_stored = start
        self.constrained_names = tuple(
            [f"gamma[{l},{j}]" for l in self.location_ids for j in range(p1)]
            + [f"beta[{l},{i}]" for l in self.location_ids for i in range(q1)]
            + [f"beta_global[{i}]" for i in range(q1)]
            + [f"beta_country[{c}]" for c in self.country_ids]
            + [f"sigma[{i}]" for i in range(q1)]
            + ["sigma_country"]
            + [f"sens[{t}]" for t in self.test_ids]
            + [f"spec[{t}]" for t in self.test_ids]
        )

    def _build_fixed(self):
        index = {n: i for i, n in enumerate(self.stored_names)}
        template = np.zeros(self.n_stored)
        fixed_mask = np.zeros(self.n_stored, dtype=bool)
        for name, value in self.spec.fixed.items():
            if name not in index:
                raise ConfigError(f"unknown parameter {name!r}", field="fixed")
            i = index[name]
            code = self.transforms[i]
            if code == LOG and not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}", field="fixed")
            if code == LOGIT and not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}", field="fixed")
            template[i] = value
            fixed_mask[i] = True
        self.fixed_mask = fixed_mask
        self._template = template
        self._template_c = np.where(self.transforms == LOGIT, 1.0 - template, 0.0)
        free = np.flatnonzero(~fixed_mask)
        self.free_index = free
        self.dim = free.size
        self.free_names = tuple(self.stored_names[i] for i in free)
        codes = self.transforms[free]
        self._fi = {c: free[codes == c] for c in (IDENTITY, LOG, LOGIT)}
        self._ui = {c: np.flatnonzero(codes == c) for c in (IDENTITY, LOG, LOGIT)}

        L, C, T, p1, q1 = self.shape
        free_stored = ~fixed_mask
        self._free_gamma = free_stored[self.slices["gamma"]].reshape(L, p1)
        self._free_beta_global = free_stored[self.slices["beta_global"]]
        self._free_sigma = free_stored[self.slices["sigma"]]
        self._free_sigma_country = bool(free_stored[self.slices["sigma_country"]][0])
        self._free_sens = free_stored[self.slices["sens"]]
        self._free_spec = free_stored[self.slices["spec"]]

    # -- data ---------------------------------------------------------------

    def _build_data(self):
        mesh = self.spec.mesh
        L, C, T, p1, q1 = self.shape
        ages, node_loc, loc_start = [], [], []
        sero = {"node": [], "bin": [], "w": []}
        death = {"node": [], "bin": [], "w": []}
        s_n, s_r, s_loc = [], [], []
        d_d, d_n, d_loc = [], [], []
        offset = 0
        for li, loc in enumerate(self.dataset.locations):
            f = self.densities[loc.location_id]
            bins = [o.bin for o in loc.serology] + [o.bin for o in loc.deaths]
            nodes = np.unique(np.round(np.concatenate(
                [mesh.nodes(b.start, b.end) for b in bins]), 12))
            loc_start.append(offset)
            ages.append(nodes)
            node_loc.append(np.full(nodes.size, li))

            def add(store, bin_index, b, total=None):
                a = mesh.nodes(b.start, b.end)
                idx = offset + np.searchsorted(nodes, np.round(a, 12))
                fw = trapezoid_weights(a) * f(a)
                mass = fw.sum()
                if not mass > 1e-12:
                    raise ZeroMassBin(f"location {loc.location_id}: no population mass in bin {b.label}")
                store["node"].append(idx)
                store["bin"].append(np.full(a.size, bin_index))
                store["w"].append(fw / mass)
                return mass

            if self.spec.include_serology:
                for o in loc.serology:
                    add(sero, len(s_n), o.bin)
                    s_n.append(o.n_tested)
                    s_r.append(o.n_positive)
                    s_loc.append(li)
            if self.spec.include_deaths:
                for o in loc.deaths:
                    mass = add(death, len(d_d), o.bin)
                    d_d.append(o.deaths)
                    d_n.append(loc.total_population * mass)
                    d_loc.append(li)
            offset += nodes.size

        self.node_age = np.concatenate(ages)
        self.node_loc = np.concatenate(node_loc).astype(np.intp)
        self.loc_start = np.array(loc_start, dtype=np.intp)
        self.n_nodes = self.node_age.size
        self.Z1 = np.hstack([np.ones((self.n_nodes, 1)), self.spec.serology_spline.evaluate(self.node_age)])
        self.X1 = np.hstack([np.ones((self.n_nodes, 1)), self.spec.ifr_spline.evaluate(self.node_age)])

        def cat(store, key, dtype):
            return np.concatenate(store[key]).astype(dtype) if store[key] else np.zeros(0, dtype)

        self.sero_q = _BinQuadrature(cat(sero, "node", np.intp), cat(sero, "bin", np.intp),
                                     cat(sero, "w", float), len(s_n))
        self.death_q = _BinQuadrature(cat(death, "node", np.intp), cat(death, "bin", np.intp),
                                      cat(death, "w", float), len(d_d))
        self.sero_n = np.array(s_n, dtype=float)
        self.sero_r = np.array(s_r, dtype=float)
        self.sero_loc = np.array(s_loc, dtype=np.intp)
        self.sero_test = self.loc_test[self.sero_loc] if s_n else np.zeros(0, np.intp)
        self.sero_const = float(np.sum(gammaln(self.sero_n + 1) - gammaln(self.sero_r + 1)
                                       - gammaln(self.sero_n - self.sero_r + 1)))
        self.death_d = np.array(d_d, dtype=float)
        self.death_pop = np.array(d_n, dtype=float)
        self.death_loc = np.array(d_loc, dtype=np.intp)
        self.death_const = float(-np.sum(gammaln(self.death_d + 1)))

        tests = self.dataset.tests
        self.val_n_sens = np.array([t.n_sens for t in tests], dtype=float)
        self.val_x_sens = np.array([t.x_sens for t in tests], dtype=float)
        self.val_n_spec = np.array([t.n_spec for t in tests], dtype=float)
        self.val_x_spec = np.array([t.x_spec for t in tests], dtype=float)

        def binom_const(n, x):
            return gammaln(n + 1) - gammaln(x + 1) - gammaln(n - x + 1)

        self.val_const_sens = binom_const(self.val_n_sens, self.val_x_sens)
        self.val_const_spec = binom_const(self.val_n_spec, self.val_x_spec)
        self._has_sero = self.sero_n.size > 0
        self._has_death = self.death_d.size > 0
        self._build_kernel_args()

    def _build_kernel_args(self):
        pr = self.spec.priors
        L, C, T, p1, q1 = self.shape
        order = ("gamma", "beta", "beta_global", "beta_country", "sigma", "sigma_country", "sens", "spec")
        offsets = np.array([self.slices[k].start for k in order], dtype=np.int64)
        dims = np.array([L, C, T, p1, q1, int(self.spec.non_centered)], dtype=np.int64)
        priors = np.array([
            pr.gamma_intercept_mean, pr.gamma_intercept_sd, pr.gamma_spline_sd,
            pr.beta_global_mean, pr.beta_global_sd, pr.sigma_scale, pr.sigma_country_scale,
            pr.sens_alpha, pr.sens_beta, pr.spec_alpha, pr.spec_beta,
            betaln(pr.sens_alpha, pr.sens_beta), betaln(pr.spec_alpha, pr.spec_beta)])
        families = np.array([
            GAMMA_INTERCEPT_FAMILIES.index(pr.gamma_intercept_family),
            GAMMA_SPLINE_FAMILIES.index(pr.gamma_spline_family),
            BETA_INTERCEPT_FAMILIES.index(pr.beta_intercept_family),
            BETA_SPLINE_FAMILIES.index(pr.beta_spline_family)], dtype=np.int64)
        i64 = np.int64
        sq, dq = self.sero_q, self.death_q
        self._kargs = (
            self._template, self._template_c, self.free_index.astype(i64),
            self.transforms[self.free_index].astype(i64), ~self.fixed_mask, dims, offsets,
            self.loc_country.astype(i64), priors, families,
            np.append(self.loc_start, self.n_nodes).astype(i64),
            np.ascontiguousarray(self.Z1[:, 1:].T), np.ascontiguousarray(self.X1[:, 1:].T),
            sq.node.astype(i64), sq.bin.astype(i64), sq.weight, self.sero_n, self.sero_r,
            self.sero_test.astype(i64), self.sero_const,
            dq.node.astype(i64), dq.bin.astype(i64), dq.weight, self.death_d, self.death_pop,
            self.death_const,
            self.val_n_sens, self.val_x_sens, np.asarray(self.val_const_sens, dtype=float),
            self.val_n_spec, self.val_x_spec, np.asarray(self.val_const_spec, dtype=float),
        )

    # -- transforms ---------------------------------------------------------

    def _natural(self, theta):
        """Stored natural-scale vector, complements of logit entries, log-Jacobian."""
        nat = self._template.copy()
        comp = self._template_c.copy()
        u_id, u_log, u_logit = self._ui[IDENTITY], self._ui[LOG], self._ui[LOGIT]
        nat[self._fi[IDENTITY]] = theta[u_id]
        ul = theta[u_log]
        nat[self._fi[LOG]] = np.exp(ul)
        ut = theta[u_logit]
        nat[self._fi[LOGIT]] = expit(ut)
        comp[self._fi[LOGIT]] = expit(-ut)
        logjac = float(np.sum(ul) + np.sum(log_expit(ut) + log_expit(-ut)))
        return nat, comp, logjac

    def _blocks(self, nat):
        L, C, T, p1, q1 = self.shape
        s = self.slices
        return (nat[s["gamma"]].reshape(L, p1), nat[s["beta"]].reshape(L, q1), nat[s["beta_global"]],
                nat[s["beta_country"]], nat[s["sigma"]], nat[s["sigma_country"]][0],
                nat[s["sens"]], nat[s["spec"]])

    def _reconstruct(self, beta_raw, beta_global, country_raw, sigma, sigma_country):
        if not self.spec.non_centered:
            return beta_raw, country_raw
        beta = beta_global + sigma * beta_raw
        beta[:, 0] += sigma_country * country_raw[self.loc_country]
        return beta, sigma_country * country_raw

    def unpack(self, theta) -> Parameters:
        nat, comp, _ = self._natural(np.asarray(theta, dtype=float))
        gamma, braw, bg, craw, sigma, sc, sens, spec = self._blocks(nat)
        beta, bc = self._reconstruct(braw, bg, craw, sigma, sc)
        return Parameters(gamma.copy(), beta.copy(), bg.copy(), bc.copy(), sigma.copy(), float(sc),
                          sens.copy(), spec.copy(), self.location_ids, self.country_ids, self.test_ids)

    def stored_from_parameters(self, params: Parameters) -> np.ndarray:
        nat = np.empty(self.n_stored)
        s = self.slices
        beta = np.asarray(params.beta, dtype=float)
        bc = np.asarray(params.beta_country, dtype=float)
        sigma = np.asarray(params.sigma, dtype=float)
        if self.spec.non_centered:
            mean = np.broadcast_to(params.beta_global, beta.shape).copy()
            mean[:, 0] += bc[self.loc_country]
            beta = (beta - mean) / sigma
            bc = bc / params.sigma_country
        nat[s["gamma"]] = np.ravel(params.gamma)
        nat[s["beta"]] = np.ravel(beta)
        nat[s["beta_global"]] = params.beta_global
        nat[s["beta_country"]] = bc
        nat[s["sigma"]] = sigma
        nat[s["sigma_country"]] = params.sigma_country
        nat[s["sens"]] = params.sens
        nat[s["spec"]] = params.spec
        return nat

    def pack(self, params: Parameters) -> np.ndarray:
        """Free unconstrained vector for ``params`` (fixed entries are ignored)."""
        nat = self.stored_from_parameters(params)[self.free_index]
        codes = self.transforms[self.free_index]
        out = nat.copy()
        out[codes == LOG] = np.log(nat[codes == LOG])
        p = nat[codes == LOGIT]
        out[codes == LOGIT] = np.log(p) - np.log1p(-p)
        return out

    def constrain(self, theta) -> np.ndarray:
        """Named natural-scale view (``constrained_names`` order); accepts a batch."""
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return self.constrain(theta[None, :])[0]
        S = theta.shape[0]
        L, C, T, p1, q1 = self.shape
        nat = np.tile(self._template, (S, 1))
        nat[:, self._fi[IDENTITY]] = theta[:, self._ui[IDENTITY]]
        nat[:, self._fi[LOG]] = np.exp(theta[:, self._ui[LOG]])
        nat[:, self._fi[LOGIT]] = expit(theta[:, self._ui[LOGIT]])
        if self.spec.non_centered:
            s = self.slices
            braw = nat[:, s["beta"]].reshape(S, L, q1)
            bg = nat[:, s["beta_global"]]
            craw = nat[:, s["beta_country"]]
            sigma = nat[:, s["sigma"]]
            sc = nat[:, s["sigma_country"]]
            beta = bg[:, None, :] + sigma[:, None, :] * braw
            beta[:, :, 0] += sc * craw[:, self.loc_country]
            nat[:, s["beta"]] = beta.reshape(S, L * q1)
            nat[:, s["beta_country"]] = sc * craw
        return nat

    def orient_init(self, theta) -> np.ndarray:
        """Reflect ``(sens, spec)`` to ``(1 - spec, 1 - sens)`` where their sum is below 1.

        Positivity is affine in prevalence with slope ``sens + spec - 1``, so
        a chain started on the reversed side can settle in the mirror mode.
        On the logit scale the reflection is ``(u, v) -> (-v, -u)``, which
        maps a uniform box to itself.  Tests with a fixed sensitivity or
        specificity are left alone.
        """
        q = np.array(theta, dtype=float)
        pos = {int(k): i for i, k in enumerate(self.free_index)}
        s = self.slices
        for k_sens, k_spec in zip(range(s["sens"].start, s["sens"].stop),
                                  range(s["spec"].start, s["spec"].stop)):
            i, j = pos.get(k_sens), pos.get(k_spec)
            if i is not None and j is not None and q[i] + q[j] < 0.0:
                q[i], q[j] = -q[j], -q[i]
        return q

    def parameters_from_constrained(self, row) -> Parameters:
        row = np.asarray(row, dtype=float)
        gamma, beta, bg, bc, sigma, sc, sens, spec = self._blocks(row)
        return Parameters(gamma.copy(), beta.copy(), bg.copy(), bc.copy(), sigma.copy(), float(sc),
                          sens.copy(), spec.copy(), self.location_ids, self.country_ids, self.test_ids)

    def parameters_from_dict(self, d: Mapping) -> Parameters:
        """Build :class:`Parameters` from the ``to_dict`` JSON layout.

        Hyperparameters missing from ``d`` default to: ``beta_global`` the
        mean location coefficients, ``beta_country`` zero, scales one.
        """
        L, C, T, p1, q1 = self.shape
        try:
            gamma = np.array([d["gamma"][l] for l in self.location_ids], dtype=float).reshape(L, p1)
            beta = np.array([d["beta"][l] for l in self.location_ids], dtype=float).reshape(L, q1)
            sens = np.array([d["sens"][t] for t in self.test_ids], dtype=float)
            spec = np.array([d["spec"][t] for t in self.test_ids], dtype=float)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"missing or malformed entry {exc}", field="true_params") from None
        bg = np.asarray(d.get("beta_global", beta.mean(axis=0)), dtype=float)
        bcd = d.get("beta_country", {})
        bc = np.array([float(bcd.get(c, 0.0)) for c in self.country_ids])
        sigma = np.asarray(d.get("sigma", np.ones(q1)), dtype=float)
        sc = float(d.get("sigma_country", 1.0))
        return Parameters(gamma, beta, bg, bc, sigma, sc, sens, spec,
                          self.location_ids, self.country_ids, self.test_ids)

    # -- log density --------------------------------------------------------

    @property
    def jit_kernel(self):
        """Compiled ``(fn, args)`` pair with ``fn(theta, args) -> (value, gradient)``."""
        return _kernel.value_and_grad, self._kargs

    def __call__(self, theta):
        """``(value, gradient)``; non-finite values are returned, not raised."""
        value, grad, _ = self._evaluate(np.asarray(theta, dtype=float), want_terms=False)
        return value, grad

    def log_density(self, theta) -> LogDensityResult:
        value, grad, terms = self._evaluate(np.asarray(theta, dtype=float), want_terms=True)
        for name, v in terms.items():
            if not np.isfinite(v):
                raise NonFinite(name, v)
        if not np.all(np.isfinite(grad)):
            raise NonFinite("gradient", grad[~np.isfinite(grad)][0])
        return LogDensityResult(value, grad, terms)

    def _curves(self, gamma, beta):
        eta = np.einsum("kj,kj->k", self.Z1, gamma[self.node_loc])
        log_ifr = np.einsum("kj,kj->k", self.X1, beta[self.node_loc])
        return eta, log_ifr

    def _evaluate(self, theta, want_terms):
        value, grad, t = _kernel.log_density(theta, *self._kargs)
        terms = None
        if want_terms:
            terms = dict(zip(TERM_NAMES, (float(x) for x in t)))
        return float(value), grad, terms

    def _evaluate_numpy(self, theta, want_terms):
        """Vectorised reference implementation of :meth:`_evaluate`."""
        spec = self.spec
        pr = spec.priors
        L, C, T, p1, q1 = self.shape
        nat, comp, logjac = self._natural(theta)
        gamma, braw, bg, craw, sigma, sc, sens, specv = self._blocks(nat)
        s = self.slices
        sens_c = comp[s["sens"]]
        spec_c = comp[s["spec"]]
        beta, bc = self._reconstruct(braw, bg, craw, sigma, sc)

        g_nat = np.zeros(self.n_stored)
        g_gamma = np.zeros((L, p1))
        g_beta = np.zeros((L, q1))
        g_sens = np.zeros(T)
        g_spec = np.zeros(T)

        eta = np.einsum("kj,kj->k", self.Z1, gamma[self.node_loc])
        pi = expit(eta)
        dpi = pi * expit(-eta)
        g_eta = np.zeros(self.n_nodes)

        ll_sero = 0.0
        if self._has_sero:
            q = self.sero_q
            pbar = q.average(pi)
            t = self.sero_test
            sb, sbc, cb, cbc = sens[t], sens_c[t], specv[t], spec_c[t]
            p = cbc * (1.0 - pbar) + sb * pbar
            one_minus_p = cb * (1.0 - pbar) + sbc * pbar
            r, n = self.sero_r, self.sero_n
            ll_sero = float(np.sum(xlogy(r, p) + xlogy(n - r, one_minus_p))) + self.sero_const
            gp = np.where(r > 0, r / np.where(r > 0, p, 1.0), 0.0) - np.where(
                n - r > 0, (n - r) / np.where(n - r > 0, one_minus_p, 1.0), 0.0)
            g_sens += np.bincount(t, weights=gp * pbar, minlength=T)
            g_spec += np.bincount(t, weights=gp * (pbar - 1.0), minlength=T)
            g_eta += q.adjoint(gp * (sb - cbc), self.n_nodes) * dpi

        ll_death = 0.0
        if self._has_death:
            q = self.death_q
            ifr = np.exp(np.einsum("kj,kj->k", self.X1, beta[self.node_loc]))
            v = pi * ifr
            lam = q.average(v)
            d, N = self.death_d, self.death_pop
            mu = N * lam
            ll_death = float(np.sum(xlogy(d, mu) - mu)) + self.death_const
            rb = np.where(d > 0, d / np.where(d > 0, lam, 1.0), 0.0) - N
            gv = q.adjoint(rb, self.n_nodes)
            sl = gv * v
            g_eta += sl * expit(-eta)
            g_beta += np.add.reduceat(self.X1 * sl[:, None], self.loc_start, axis=0)

        g_gamma += np.add.reduceat(self.Z1 * g_eta[:, None], self.loc_start, axis=0)

        # test validation
        ll_val = 0.0
        fs, fp = self._free_sens, self._free_spec
        if fs.any():
            x, n = self.val_x_sens[fs], self.val_n_sens[fs]
            ll_val += float(np.sum(xlogy(x, sens[fs]) + xlogy(n - x, sens_c[fs]) + self.val_const_sens[fs]))
            g_sens[fs] += x / sens[fs] - (n - x) / sens_c[fs]
        if fp.any():
            x, n = self.val_x_spec[fp], self.val_n_spec[fp]
            ll_val += float(np.sum(xlogy(x, specv[fp]) + xlogy(n - x, spec_c[fp]) + self.val_const_spec[fp]))
            g_spec[fp] += x / specv[fp] - (n - x) / spec_c[fp]

        # priors
        lp = 0.0
        fg = self._free_gamma
        g0, gj = gamma[:, 0], gamma[:, 1:]
        m0 = fg[:, 0]
        fam = pr.gamma_intercept_family
        if fam == "normal":
            lp += float(np.sum(normal_logpdf(g0[m0], pr.gamma_intercept_mean, pr.gamma_intercept_sd)))
            g_gamma[m0, 0] -= (g0[m0] - pr.gamma_intercept_mean) / pr.gamma_intercept_sd**2
        elif fam == "uniform_prevalence":
            lp += float(np.sum(log_expit(g0[m0]) + log_expit(-g0[m0])))
            g_gamma[m0, 0] += 1.0 - 2.0 * expit(g0[m0])
        if pr.gamma_spline_family == "normal":
            mj = fg[:, 1:]
            lp += float(np.sum(normal_logpdf(gj[mj], 0.0, pr.gamma_spline_sd)))
            g_gamma[:, 1:] -= np.where(mj, gj, 0.0) / pr.gamma_spline_sd**2

        fb = self._free_beta_global
        lp += float(np.sum(normal_logpdf(bg[fb], pr.beta_global_mean, pr.beta_global_sd)))
        g_bg = np.where(fb, -(bg - pr.beta_global_mean) / pr.beta_global_sd**2, 0.0)

        fsig = self._free_sigma
        lp += float(np.sum(half_normal_logpdf(sigma[fsig], pr.sigma_scale)))
        g_sigma = np.where(fsig, -sigma / pr.sigma_scale**2, 0.0)
        g_sc = 0.0
        if self._free_sigma_country:
            lp += float(half_normal_logpdf(sc, pr.sigma_country_scale))
            g_sc = -sc / pr.sigma_country_scale**2

        if fs.any():
            lp += float(np.sum(xlogy(pr.sens_alpha - 1, sens[fs]) + xlogy(pr.sens_beta - 1, sens_c[fs])
                               - betaln(pr.sens_alpha, pr.sens_beta)))
            g_sens[fs] += (pr.sens_alpha - 1) / sens[fs] - (pr.sens_beta - 1) / sens_c[fs]
        if fp.any():
            lp += float(np.sum(xlogy(pr.spec_alpha - 1, specv[fp]) + xlogy(pr.spec_beta - 1, spec_c[fp])
                               - betaln(pr.spec_alpha, pr.spec_beta)))
            g_spec[fp] += (pr.spec_alpha - 1) / specv[fp] - (pr.spec_beta - 1) / spec_c[fp]

        g_craw = np.zeros(C)
        if spec.non_centered:
            lp += float(-0.5 * np.sum(braw**2) - 0.5 * braw.size * LOG_2PI)
            lp += float(-0.5 * np.sum(craw**2) - 0.5 * craw.size * LOG_2PI)
            # chain rule through beta = beta_global + sigma * raw (+ sigma_country * country_raw)
            g_braw = sigma * g_beta - braw
            g_bg += g_beta.sum(axis=0)
            g_sigma += np.sum(braw * g_beta, axis=0)
            g_country = np.bincount(self.loc_country, weights=g_beta[:, 0], minlength=C)
            g_craw += sc * g_country - craw
            g_sc += float(np.sum(craw * g_country))
        else:
            mean = np.broadcast_to(bg, beta.shape).copy()
            mean[:, 0] += bc[self.loc_country]
            resid = beta - mean
            hier = np.ones((L, q1), dtype=bool)
            if pr.beta_intercept_family != "hierarchical":
                hier[:, 0] = False
            if pr.beta_spline_family != "hierarchical":
                hier[:, 1:] = False
            if hier.any():
                sd = np.broadcast_to(sigma, beta.shape)
                lp += float(np.sum(normal_logpdf(beta[hier], mean[hier], sd[hier])))
                z = np.where(hier, resid / sd**2, 0.0)
                g_beta -= z
                g_bg += z.sum(axis=0)
                g_craw += np.bincount(self.loc_country, weights=z[:, 0], minlength=C)
                g_sigma += np.sum(np.where(hier, resid**2 / sd**3 - 1.0 / sd, 0.0), axis=0)
            if pr.beta_intercept_family == "uniform_rate":
                lp += float(np.sum(beta[:, 0]))
                g_beta[:, 0] += 1.0
            lp += float(np.sum(normal_logpdf(bc, 0.0, sc)))
            g_craw -= bc / sc**2
            g_sc += float(np.sum(bc**2 / sc**3 - 1.0 / sc))
            g_braw = g_beta

        g_nat[s["gamma"]] = g_gamma.ravel()
        g_nat[s["beta"]] = g_braw.ravel()
        g_nat[s["beta_global"]] = g_bg
        g_nat[s["beta_country"]] = g_craw
        g_nat[s["sigma"]] = g_sigma
        g_nat[s["sigma_country"]] = g_sc
        g_nat[s["sens"]] = g_sens
        g_nat[s["spec"]] = g_spec

        grad = np.empty(self.dim)
        grad[self._ui[IDENTITY]] = g_nat[self._fi[IDENTITY]]
        fl = self._fi[LOG]
        grad[self._ui[LOG]] = g_nat[fl] * nat[fl] + 1.0
        ft = self._fi[LOGIT]
        grad[self._ui[LOGIT]] = g_nat[ft] * nat[ft] * comp[ft] + (comp[ft] - nat[ft])

        value = ll_sero + ll_death + ll_val + lp + logjac
        if not np.isfinite(value):
            value = -np.inf
        terms = None
        if want_terms:
            terms = dict(zip(TERM_NAMES, (ll_sero, ll_death, ll_val, lp, logjac)))
        return value, grad, terms

    # -- forward quantities -------------------------------------------------

    def bin_rates(self, params: Parameters):
        """Expected serology positivity per serology bin and expected death
        count per death bin, in dataset order."""
        gamma = np.asarray(params.gamma, dtype=float)
        beta = np.asarray(params.beta, dtype=float)
        eta = np.einsum("kj,kj->k", self.Z1, gamma[self.node_loc])
        pi = expit(eta)
        pos = np.zeros(0)
        if self._has_sero:
            pbar = self.sero_q.average(pi)
            t = self.sero_test
            pos = positivity(pbar, np.asarray(params.sens)[t], np.asarray(params.spec)[t])
        mu = np.zeros(0)
        if self._has_death:
            ifr = np.exp(np.einsum("kj,kj->k", self.X1, beta[self.node_loc]))
            mu = self.death_pop * self.death_q.average(pi * ifr)
        return pos, mu

    def initial_point(self, rng, jitter: float = 2.0) -> np.ndarray:
        return rng.uniform(-jitter, jitter, size=self.dim)


def log_posterior(theta, data, spec: ModelSpec | None = None) -> LogDensityResult:
    """Joint log-posterior and gradient at an unconstrained free vector.

    ``data`` may be a prepared :class:`Model` (preferred when evaluating
    repeatedly) or a :class:`StudyDataset`.
    """
    model = data if isinstance(data, Model) else Model(data, spec)
    return model.log_density(theta)


def simulate_dataset(true_params: Parameters, template: StudyDataset, seed: int,
                     spec: ModelSpec | None = None, model: Model | None = None) -> StudyDataset:
    """Redraw every count in ``template`` from the model at ``true_params``."""
    if model is None:
        full = replace(spec or ModelSpec(), include_serology=True, include_deaths=True, fixed={})
        model = Model(template, full)
    rng = np.random.default_rng(seed)
    pos, mu = model.bin_rates(true_params)
    pos = np.clip(pos, 0.0, 1.0)
    sens = np.asarray(true_params.sens, dtype=float)
    specv = np.asarray(true_params.spec, dtype=float)

    tests = []
    for i, t in enumerate(template.tests):
        tests.append(TestValidation(t.test_id, t.n_sens, int(rng.binomial(t.n_sens, sens[i])),
                                    t.n_spec, int(rng.binomial(t.n_spec, specv[i]))))
    locations = []
    si = di = 0
    for loc in template.locations:
        sero = []
        for o in loc.serology:
            if model.spec.include_serology:
                sero.append(SerologyBinObs(o.bin, o.n_tested, int(rng.binomial(o.n_tested, pos[si]))))
                si += 1
            else:
                sero.append(o)
        deaths = []
        for o in loc.deaths:
            if model.spec.include_deaths:
                deaths.append(DeathBinObs(o.bin, int(rng.poisson(mu[di]))))
                di += 1
            else:
                deaths.append(o)
        locations.append(replace(loc, serology=tuple(sero), deaths=tuple(deaths)))
    return StudyDataset(tuple(locations), tuple(tests), dict(template.national_populations))
