import json

import numpy as np
import pytest

from loocmi.datasets import generate
from loocmi.exceptions import ParseError
from loocmi.reporting import (
    BoundReport,
    read_predictions_csv,
    read_weights_csv,
    write_predictions_csv,
    write_weights_csv,
)
from loocmi.trainers import TrainConfig, predict_all, train_loo


@pytest.fixture
def loo():
    ds = generate("gaussian-blobs", 0, 8, 2)
    cfg = TrainConfig("logistic", lam=0.05, optimizer="full-batch-gd", lr=1.0, steps=30)
    return ds, train_loo(ds, cfg)


def test_weights_roundtrip(tmp_path, loo):
    ds, lw = loo
    write_weights_csv(lw, tmp_path / "w.csv")
    back = read_weights_csv(tmp_path / "w.csv", config=lw.config)
    assert np.array_equal(back.weights, lw.weights)
    assert np.array_equal(back.full_weights, lw.full_weights)
    write_weights_csv(back, tmp_path / "w2.csv")
    assert (tmp_path / "w.csv").read_bytes() == (tmp_path / "w2.csv").read_bytes()
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert len(lines) == 1 + 8 + 1 and lines[-1].startswith("full,")


def test_predictions_roundtrip(tmp_path, loo):
    ds, lw = loo
    P = predict_all(ds, lw)
    write_predictions_csv(P, tmp_path / "p.csv")
    back = read_predictions_csv(tmp_path / "p.csv")
    assert np.array_equal(back.preds, P.preds)
    assert back.probabilities


def test_subset_weights_roundtrip(tmp_path):
    ds = generate("linear-regression", 0, 10, 2)
    lw = train_loo(ds, TrainConfig("ridge"), subset=[3, 7])
    write_weights_csv(lw, tmp_path / "w.csv")
    back = read_weights_csv(tmp_path / "w.csv", n=10)
    assert list(back.indices) == [3, 7]
    assert back.is_subset


@pytest.mark.parametrize("text,line", [
    ("index,w0\n0,1\n0,2\n", 3),
    ("index,w0\n0,1,2\n", 2),
    ("index,w0\nx,1\n", 2),
    ("index,w1\n0,1\n", 1),
])
def test_weights_parse_errors(tmp_path, text, line):
    p = tmp_path / "w.csv"
    p.write_text(text)
    with pytest.raises(ParseError) as ei:
        read_weights_csv(p)
    assert ei.value.line == line
    assert f":{line}:" in str(ei.value)


def test_predictions_missing_entry(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("i,j,p0\n0,0,1\n0,1,1\n1,0,1\n")
    with pytest.raises(ParseError, match="missing"):
        read_predictions_csv(p)


def test_report_json_order_and_roundtrip(tmp_path):
    r = BoundReport(n=5, loo_cmi_upper=0.1, floo_cmi_upper=0.2, gen_bound_weights=1 / 3,
                    oracle={"loo_mc": {"value": 0.05, "std_err": 0.01, "samples": 1000, "seed": 0}})
    d = json.loads(r.to_json())
    keys = list(d)
    assert keys[:3] == ["n", "units", "experiment"]
    assert keys.index("loo_cmi_upper") < keys.index("floo_cmi_upper") < keys.index("oracle")
    assert d["units"] == "nats"
    assert d["gen_bound_weights"] == "0.33333333333333331"
    r.write(tmp_path / "r.json")
    back = BoundReport.read(tmp_path / "r.json")
    assert back.gen_bound_weights == 1 / 3
    assert back.oracle["loo_mc"]["samples"] == 1000
    assert back.to_json() == r.to_json()
