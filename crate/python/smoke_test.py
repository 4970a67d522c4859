"""Exercises the Python bindings end to end on a small cohort."""

import math
import random
import tempfile
from pathlib import Path

import pyrtgmff as rt


def check_reports() -> None:
    ds = rt.Dataset.toy(6, 42)
    assert len(ds) == 6
    subject = ds.subject(0)
    values = subject["delta_bold"]
    assert len(values) == rt.N_ROIS

    triplets = rt.discretize(values, 0.15, 0.30)
    assert {s for _, s, _ in triplets} <= {"weak", "moderate", "strong"}

    text = rt.render_report(values, subject["age_years"], subject["gender"])
    parsed = rt.parse_report(text)
    assert len(parsed["clauses"]) == rt.N_ROIS
    assert [c[1] for c in parsed["clauses"]] == [s for _, s, _ in triplets]

    toks = rt.tokens(values, subject["age_years"], subject["gender"])
    assert toks[0].startswith("[AGE:") and len(toks) == rt.N_ROIS + 2

    with tempfile.TemporaryDirectory() as d:
        assert ds.write_reports(d) == 6
        assert len(list(Path(d).glob("*.report.txt"))) == 6

    try:
        rt.discretize(values, 0.2, 0.21)
    except ValueError as e:
        assert "tau2" in str(e)
    else:
        raise AssertionError("invalid thresholds accepted")


def check_wavelets() -> None:
    rng = random.Random(1)
    shape = [1, 3, 16, 16]
    x = [rng.uniform(-1, 1) for _ in range(math.prod(shape))]
    bands, band_shape = rt.haar_dwt(x, shape)
    assert band_shape == [1, 12, 8, 8]
    back, _ = rt.haar_idwt(bands, band_shape)
    assert max(abs(a - b) for a, b in zip(x, back)) < 1e-12
    rec, energy = rt.wavelet_roundtrip(x, shape, 3)
    assert max(abs(a - b) for a, b in zip(x, rec)) < 1e-12
    assert abs(energy - sum(v * v for v in x)) < 1e-9


def check_metrics() -> None:
    scores = [0.9, 0.8, 0.4, 0.6, 0.4, 0.1]
    labels = [1, 1, 1, 0, 0, 0]
    assert abs(rt.auc(scores, labels) - 7.5 / 9) < 1e-12
    m = rt.evaluate(scores, labels)
    assert m["tp"] + m["fn"] == 3 and m["tn"] + m["fp"] == 3
    assert rt.auc([0.1, 0.2], [1, 1]) is None


def check_model() -> None:
    ds = rt.Dataset.toy(6, 3)
    model = rt.Model("toy", 42)
    assert model.image_shape == ds.image_shape
    assert model.n_parameters > 0
    probs = model.predict(ds)
    assert len(probs) == 6 and all(0.0 < p < 1.0 for p in probs)

    max_err, passed, n_leaves = rt.grad_check(4, 42, 2)
    assert passed and max_err < 1e-4 and n_leaves > 0

    cv = rt.Dataset(24, 2, 3.0, 5, 16, 16, 64, 3).cross_validate("toy", 2, 42)
    assert len(cv["folds"]) == 2
    print(f"cross-validated accuracy {cv['summary']['acc']['mean']:.3f}")


if __name__ == "__main__":
    check_reports()
    check_wavelets()
    check_metrics()
    check_model()
    print("smoke test passed")
