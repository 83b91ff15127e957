import json
from pathlib import Path

import numpy as np
import pytest

madlab = pytest.importorskip("madlab")

GOLDEN = Path(__file__).resolve().parents[1] / "golden"


def test_mlp_predict_shapes():
    net = madlab.mlp(4, [8, 3], 2, seed=1)
    x = np.random.default_rng(0).uniform(size=(5, 4))
    assert len(net.predict(x)) == 5
    assert net.embed(x).shape == (5, 3)
    assert net.logits(x).shape == (5, 2)
    assert all(v >= 0 for v in net.jacobian_norms(x))


def test_fgsm_budget():
    net = madlab.mlp(6, [5], 3, seed=2)
    x = np.linspace(0, 1, 6)
    adv = madlab.fgsm(net, x, 1, 0.1)
    assert np.max(np.abs(adv - x)) <= 0.1
    assert adv.min() >= 0 and adv.max() <= 1


def test_dbi_and_norm():
    z = np.array([[0.0, 0.0], [0.2, 0.0], [2.0, 0.0], [2.2, 0.0]])
    assert madlab.davies_bouldin(z, np.array([0, 0, 1, 1])) == pytest.approx(0.1)
    assert madlab.frobenius_norm(np.array([[3.0, 4.0]])) == 5.0


def test_errors_are_raised():
    with pytest.raises(madlab.MadlabError):
        madlab.load_checkpoint("/nonexistent/model.madn")


def test_pipeline_matches_golden(tmp_path):
    text = (GOLDEN / "tiny.ini").read_text()
    madlab.run_pipeline(text, str(tmp_path), 1)
    got = json.loads((tmp_path / "margin.json").read_text())
    want = json.loads((GOLDEN / "expected" / "margin.json").read_text())
    assert got == want
    net = madlab.load_checkpoint(str(tmp_path / "model.madn"))
    assert net.num_classes >= 2
