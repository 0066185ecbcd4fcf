"""How close is the amortised approximation to exact refitting, and what does it cost?"""
import time

import numpy as np

from acnml.cnml import AcnmlConfig, acnml, exact_cnml, map_predict
from acnml.data import BlobSpec, make_blobs
from acnml.models import L2Prior, LogisticRegression, fit_map
from acnml.posterior import laplace_fit

m = LogisticRegression(2, 2)
prior = L2Prior(1e-2)
queries = np.random.default_rng(0).uniform(-4, 4, (50, 2))

print("   n   mean TV    max TV   exact us  acnml us  map us")
for n in (50, 100, 200, 400, 800):
    d = make_blobs([BlobSpec((-1, 0), 1.0, n // 2, 5), BlobSpec((1, 0), 1.0, n // 2, 5)])
    theta = fit_map(m, d, prior)
    q = laplace_fit(m, d, prior, "full")
    t0 = time.perf_counter()
    ex = np.array([exact_cnml(m, d, x, prior, theta_train=theta).probs for x in queries])
    t1 = time.perf_counter()
    ac = np.array([acnml(m, q, x).probs for x in queries])
    t2 = time.perf_counter()
    for x in queries:
        map_predict(m, q, x)
    t3 = time.perf_counter()
    tv = 0.5 * np.abs(ex - ac).sum(axis=1)
    k = len(queries) / 1e6
    print(f"{n:>4}  {tv.mean():.2e}  {tv.max():.2e}  {(t1 - t0) / k:8.0f}  {(t2 - t1) / k:8.0f}"
          f"  {(t3 - t2) / k:6.1f}")

# exact cost grows with n (every refit touches all training points); the
# amortised cost does not depend on n at all

# temperature: alpha scales the query's pull against the posterior
x = np.array([0.0, 3.5])
for alpha in (0.25, 1.0, 4.0):
    print("alpha", alpha, acnml(m, q, x, AcnmlConfig(alpha=alpha)).probs.round(3))
