"""Rogan-Gladen prevalence against the model on one synthetic location.

The naive estimator corrects each bin's positivity with plug-in test
characteristics and ignores their uncertainty.  The model pools bins
through the prevalence curve and propagates test uncertainty.  Run with
``python demos/naive_vs_model.py``.
"""
import numpy as np

from ageifr.data import crude_rates
from ageifr.diagnostics import reversed_tests
from ageifr.model import Model
from ageifr.quadrature import QuadratureMesh, bin_average
from ageifr.sampler import SamplerConfig, sample
from ageifr.summaries import SERO, evaluate_curves, rogan_gladen
from ageifr.synthetic import synthetic_study

_, truth, data = synthetic_study(seed=0)
model = Model(data)
draws = sample(model, SamplerConfig(seed=7, warmup=500, samples=500))
assert not reversed_tests(draws), "chains settled in the reversed-test mode; try another seed"

loc = data.locations[0]
f = model.densities[loc.location_id]
sens, spec = crude_rates(data.test(loc.test_id))
print(f"{loc.location_id}: crude sensitivity {sens:.3f}, specificity {spec:.3f}")
print(f"{'bin':>9s} {'truth':>7s} {'naive':>7s} {'naive 95%':>17s} {'model':>7s} {'model 95%':>17s}")
mesh = QuadratureMesh(model.spec.mesh_step)
li = model.location_ids.index(loc.location_id)
for o in loc.serology:
    a = mesh.nodes(o.bin.start, o.bin.end)
    # bin-averaged prevalence of every draw
    curves = evaluate_curves(draws, loc.location_id, SERO, a, model.spec)
    post = np.array([bin_average(lambda x, c=c: np.interp(x, a, c), f, o.bin, mesh) for c in curves])
    x = model.spec.serology_spline.evaluate(a)
    true_vals = 1 / (1 + np.exp(-(truth.gamma[li, 0] + x @ truth.gamma[li, 1:])))
    true_avg = bin_average(lambda z: np.interp(z, a, true_vals), f, o.bin, mesh)
    rg = rogan_gladen(o, sens, spec)
    label = f"{o.bin.lo}-{'' if o.bin.hi is None else o.bin.hi}"
    lo, hi = np.quantile(post, [0.025, 0.975])
    print(f"{label:>9s} {true_avg:7.3f} {rg.estimate:7.3f} [{rg.lo95:6.3f}, {rg.hi95:6.3f}] "
          f"{np.median(post):7.3f} [{lo:6.3f}, {hi:6.3f}]")
