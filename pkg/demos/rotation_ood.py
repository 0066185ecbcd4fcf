"""Calibration under a covariate shift: three blobs, test set rotated by 60 degrees.

Same run as ``acnml compare --config configs/blob_compare.json``, done in-process.
"""
import numpy as np

from acnml.calibration import EvaluationRecord, evaluate, phi_diagnostics
from acnml.cnml import acnml, bma_predict, map_predict
from acnml.data import BlobSpec, make_blobs, rotate_points
from acnml.models import L2Prior, LogisticRegression
from acnml.posterior import laplace_fit


def blobs(count, seed):
    ang = np.deg2rad([90, 210, 330])
    return make_blobs([BlobSpec((2.5 * np.cos(a), 2.5 * np.sin(a)), 1.0, count, seed) for a in ang])


train, test = blobs(50, 1), blobs(100, 2)
splits = {"in": test, "ood": rotate_points(test, 60.0)}
m = LogisticRegression(2, 3)
q = laplace_fit(m, train, L2Prior(1e-3), "full")
rng = np.random.default_rng(0)

methods = {
    "map": lambda x: (map_predict(m, q, x), None),
    "bma": lambda x: (bma_predict(m, q, x, 30, rng), None),
    "acnml": lambda x: (lambda r: (r.probs, r.log_normalizer_phi))(acnml(m, q, x)),
}
print("method split    nll    acc    ece")
for name, f in methods.items():
    for split, d in splits.items():
        recs = []
        for x, c in zip(d.inputs, d.labels):
            probs, phi = f(x)
            recs.append(EvaluationRecord(probs, c, phi))
        rep = evaluate(recs)
        print(f"{name:>6} {split:>5}  {rep.nll:.3f}  {rep.accuracy:.3f}  {rep.ece:.3f}")
        if name == "acnml" and split == "ood":
            diag = phi_diagnostics(recs, num_bins=5)
            print("        phi: wrong %.3f vs right %.3f" % (diag.mean_phi_incorrect,
                                                          diag.mean_phi_correct))
            print("        accuracy by phi quintile", [round(c[1], 2) for c in diag.curve])
