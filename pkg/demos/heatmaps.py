"""Exact CNML vs the MAP plug-in on the pinned two-blob problem.

Prints a coarse character map of the max class probability, then shows how
the far-field confidence grows with the prior strength.
"""
import numpy as np

from acnml.cnml import exact_cnml
from acnml.data import FIG_BLOBS, GridSpec, heatmap, make_blobs
from acnml.models import L2Prior, LogisticRegression, fit_map

m = LogisticRegression(2, 2)
data = make_blobs(FIG_BLOBS)
prior = L2Prior(1e-3)
theta = fit_map(m, data, prior)

grid = GridSpec(-8, 8, -8, 8, 24)
shades = " .:-=+*#%@"


def show(table, title):
    top = table[:, 2:].max(axis=1).reshape(grid.resolution, grid.resolution)
    # 0.5 -> blank, 1.0 -> '@'
    idx = np.clip(((top - 0.5) / 0.5 * (len(shades) - 1)).round().astype(int), 0, len(shades) - 1)
    print(title)
    for row in idx[::-1]:  # y grows upward
        print("  " + "".join(shades[i] * 2 for i in row))
    print()


show(heatmap(lambda x: m.predict(theta, x), grid), "MAP plug-in: confident everywhere off the boundary")
show(heatmap(lambda x: exact_cnml(m, data, x, prior, theta_train=theta).probs, grid),
     "exact CNML: confident only near the data")

# a query far above the blobs: either label can be fit without hurting the training points
x = np.array([0.0, 7.5])
r = exact_cnml(m, data, x, prior, theta_train=theta)
print("far query", x, "MAP", m.predict(theta, x).round(3), "CNML", r.probs.round(3),
      "log-normaliser", round(r.log_normalizer_phi, 3))

# stronger priors stop the per-label refits from bending towards the query
far = np.array([(a, b) for b in (-6.5, 6.5) for a in (-6, 0, 6)], float)
for lam in (0.1, 1.0, 10.0):
    p = L2Prior(lam / data.n)  # penalty on the summed log-likelihood
    th = fit_map(m, data, p)
    conf = [exact_cnml(m, data, q, p, theta_train=th).probs.max() for q in far]
    print(f"lambda {lam:>4}: mean far-field max prob {np.mean(conf):.3f}")
