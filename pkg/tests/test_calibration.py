import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acnml.calibration import (EvaluationRecord, curve_inversions, dumps_json, ece_from_bins,
                               equal_mass_sizes, evaluate, phi_diagnostics, write_phi_csv,
                               write_report_csv, write_report_json)
from acnml.errors import ContractError

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture():
    with open(FIXTURES / "ece_40.csv") as fh:
        rows = list(csv.DictReader(fh))
    records = [EvaluationRecord(np.array([float(r["p0"]), float(r["p1"])]), int(r["label"]))
               for r in rows]
    return records, json.loads((FIXTURES / "ece_40.json").read_text())


def random_records(rng, n, k=3, with_phi=False):
    out = []
    for _ in range(n):
        p = rng.dirichlet(np.ones(k))
        out.append(EvaluationRecord(p, int(rng.integers(k)),
                                    float(rng.normal()) if with_phi else None))
    return out


# -- record contract ----------------------------------------------------------------

def test_record_rejects_bad_inputs():
    with pytest.raises(ContractError):
        EvaluationRecord(np.array([0.5, 0.6]), 0)
    with pytest.raises(ContractError):
        EvaluationRecord(np.array([0.5, 0.5]), 2)
    with pytest.raises(ContractError):
        EvaluationRecord(np.array([1.0]), 0)
    with pytest.raises(ContractError):
        evaluate([])


def test_equal_mass_sizes_spread_remainder_low():
    assert equal_mass_sizes(23, 5) == [5, 5, 5, 4, 4]
    assert sum(equal_mass_sizes(1197, 20)) == 1197


# -- evaluate -----------------------------------------------------------------------

def test_perfect_predictor():
    recs = [EvaluationRecord(np.eye(3)[i % 3], i % 3) for i in range(30)]
    r = evaluate(recs)
    assert (r.ece, r.nll, r.accuracy) == (0.0, 0.0, 1.0)


def test_calibrated_by_construction():
    recs = [EvaluationRecord(np.array([0.7, 0.3]), 0 if i < 70 else 1) for i in range(100)]
    r = evaluate(recs, num_bins=1)
    assert r.ece == pytest.approx(0.0, abs=1e-12)
    assert r.accuracy == pytest.approx(0.7)


def test_hand_worked_fixture():
    records, doc = load_fixture()
    r = evaluate(records, num_bins=doc["num_bins"])
    assert r.ece == pytest.approx(doc["ece"], abs=1e-12)
    assert r.nll == pytest.approx(doc["nll"], abs=1e-12)
    assert r.accuracy == pytest.approx(doc["accuracy"], abs=1e-12)
    for got, want in zip(r.bins, doc["bins"]):
        assert got.count == want["count"]
        assert got.mean_confidence == pytest.approx(want["mean_confidence"], abs=1e-12)
        assert got.mean_accuracy == pytest.approx(want["mean_accuracy"], abs=1e-12)


def test_nll_uses_natural_log():
    r = evaluate([EvaluationRecord(np.array([0.25, 0.75]), 1)], num_bins=1)
    assert r.nll == pytest.approx(math.log(4 / 3), abs=1e-15)


def test_zero_probability_true_label_gives_infinite_nll():
    r = evaluate([EvaluationRecord(np.array([1.0, 0.0]), 1)], num_bins=1)
    assert r.nll == math.inf


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 120), st.integers(1, 20))
def test_report_invariants(seed, n, num_bins):
    rng = np.random.default_rng(seed)
    recs = random_records(rng, n)
    r = evaluate(recs, num_bins)
    assert 0.0 <= r.ece <= 1.0
    assert r.nll >= 0.0
    assert len(r.bins) == num_bins
    assert sum(b.count for b in r.bins) == n
    assert abs(r.ece - ece_from_bins(r.bins)) <= 1e-12
    # permutation invariance of every field
    shuffled = [recs[i] for i in rng.permutation(n)]
    assert evaluate(shuffled, num_bins) == r


@pytest.mark.parametrize("n", [40, 100, 200])
def test_duplicated_records_leave_metrics_unchanged(n):
    # equal-mass bins of the doubled list are the doubled bins when n divides evenly
    recs = random_records(np.random.default_rng(n), n)
    a, b = evaluate(recs), evaluate(recs + recs)
    assert b.ece == pytest.approx(a.ece, abs=1e-12)
    assert b.nll == pytest.approx(a.nll, abs=1e-12)
    assert b.accuracy == pytest.approx(a.accuracy, abs=1e-12)


def test_argmax_tie_resolves_to_lowest_label():
    assert EvaluationRecord(np.array([0.5, 0.5]), 0).correct
    assert not EvaluationRecord(np.array([0.5, 0.5]), 1).correct


# -- export -------------------------------------------------------------------------

def test_json_fields_and_round_trip(tmp_path):
    records, _ = load_fixture()
    r = evaluate(records, num_bins=2)
    path = tmp_path / "report.json"
    write_report_json(r, path)
    doc = json.loads(path.read_text())
    assert list(doc) == ["ece", "nll", "accuracy", "bins"]
    assert list(doc["bins"][0]) == ["mean_confidence", "mean_accuracy", "count"]
    assert doc["ece"] == r.ece and doc["nll"] == r.nll


def test_csv_export(tmp_path):
    r = evaluate(random_records(np.random.default_rng(1), 50), num_bins=5)
    path = tmp_path / "rel.csv"
    write_report_csv(r, path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 5
    assert [int(row["count"]) for row in rows] == [b.count for b in r.bins]
    assert float(rows[2]["mean_confidence"]) == r.bins[2].mean_confidence


def test_dumps_json_non_finite():
    assert json.loads(dumps_json({"a": math.inf, "b": [math.nan]}))["a"] == math.inf


# -- phi diagnostics ----------------------------------------------------------------

def test_phi_requires_values():
    with pytest.raises(ContractError, match="record 0"):
        phi_diagnostics([EvaluationRecord(np.array([0.5, 0.5]), 0)])


def test_phi_histograms_partition_records():
    recs = random_records(np.random.default_rng(2), 300, with_phi=True)
    d = phi_diagnostics(recs)
    assert d.correct_counts.sum() + d.incorrect_counts.sum() == 300
    assert d.correct_counts.sum() == sum(r.correct for r in recs)
    assert sum(c[2] for c in d.curve) == 300
    means = [c[0] for c in d.curve]
    assert means == sorted(means)


def test_phi_separates_when_confidence_tracks_it():
    # high phi marks the uncertain inputs: accuracy falls as phi grows
    rng = np.random.default_rng(3)
    recs = []
    for i in range(400):
        phi = i / 400 * math.log(2)
        wrong = rng.random() < phi / math.log(2) * 0.5
        recs.append(EvaluationRecord(np.array([0.8, 0.2]), int(wrong), phi))
    d = phi_diagnostics(recs, num_bins=4)
    assert d.mean_phi_incorrect > d.mean_phi_correct
    assert curve_inversions(d.curve) == 0


def test_constant_phi_gets_one_bin(tmp_path):
    recs = [EvaluationRecord(np.array([0.6, 0.4]), i % 2, 0.1) for i in range(10)]
    d = phi_diagnostics(recs, hist_bins=4)
    assert d.edges[0] < 0.1 < d.edges[-1]
    assert (d.correct_counts + d.incorrect_counts).max() == 10
    write_phi_csv(d, tmp_path / "h.csv", tmp_path / "c.csv")
    assert len(open(tmp_path / "h.csv").read().splitlines()) == 5


def test_curve_inversions_counts_rises():
    assert curve_inversions([(0, 0.9, 1), (1, 0.8, 1), (2, 0.85, 1), (3, 0.1, 1)]) == 1
