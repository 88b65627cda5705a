"""The second posterior mode with ``sens + spec < 1``.

Positivity ``pi * sens + (1 - pi) * (1 - spec)`` is matched equally well by a
test that is mostly wrong and a prevalence near the other end.  Validation
counts make that mode far less probable, but with few controls the chains
can still settle there, and since they agree with each other R-hat does
not notice.  ``reversed_tests`` flags it.  Run with
``python demos/reversed_test_mode.py``.
"""
import numpy as np

from ageifr.diagnostics import reversed_tests
from ageifr.model import Model
from ageifr.sampler import SamplerConfig, sample
from ageifr.synthetic import synthetic_study

# test T1 of this study has only 60 positive and 200 negative controls
_, truth, data = synthetic_study(seed=3)
model = Model(data)
print("true sens + spec:", {t: round(float(s + p), 3) for t, s, p in zip(truth.test_ids, truth.sens, truth.spec)})

for seed in (0, 3):
    d = sample(model, SamplerConfig(seed=seed, chains=1, warmup=300, samples=200))
    total = {t: round(float(np.median(d[f"sens[{t}]"] + d[f"spec[{t}]"])), 3) for t in truth.test_ids}
    print(f"seed {seed}: posterior median sens + spec {total}, reversed: {reversed_tests(d) or 'none'}")
