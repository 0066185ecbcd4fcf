"""Numerical certificates for the influence-function estimate of the per-label refit."""
import numpy as np

from acnml.data import BlobSpec, make_blobs
from acnml.models import L2Prior, LogisticRegression
from acnml.posterior import laplace_fit
from acnml.verification import (DiscreteModelClass, brute_force_nml, certify_distribution_bound,
                                certify_parameter_bound, regret)

m = LogisticRegression(2, 2)
prior = L2Prior(1e-2)
x, y = np.array([1.0, 1.5]), 1

print("   n        lhs        rhs  holds  applicable")
ns, errs = [], []
for n in (50, 100, 200, 400):
    d = make_blobs([BlobSpec((-1, 0), 1.0, n // 2, 9), BlobSpec((1, 0), 1.0, n // 2, 9)])
    c = certify_parameter_bound(m, d, prior, x, y, num_samples=2000)
    ns.append(n)
    errs.append(c.lhs)
    print(f"{n:>4}  {c.lhs:.3e}  {c.rhs:.3e}  {c.holds!s:>5}  {c.applicable}")
print("log-log slope of the refit error:", round(np.polyfit(np.log(ns), np.log(errs), 1)[0], 2))
# the bound's applicability threshold shrinks as fast as delta itself, so
# 'applicable' stays false here even though the bound holds with room to spare

q = laplace_fit(m, d, prior, "full")
c = certify_distribution_bound(m, d, prior, q, x)
print(f"\nlog-prob gap {c.lhs:.2e} <= (k+1) L delta = {c.rhs:.2e}: {c.holds}")

# NML on a finite space: every sequence pays the same regret
cls = DiscreteModelClass.bernoulli_grid(1001)
for length in (2, 5, 10):
    r = regret(brute_force_nml(cls, length), cls, length)
    print(f"m={length:>2}: regret {r.mean():.6f}, spread {r.max() - r.min():.1e}")
