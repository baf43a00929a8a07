import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facechannel.dataset import DatasetManifest, LoadedDataset, Sample
from facechannel.errors import InsufficientDataError, ShapeError
from facechannel.metrics import (
    CCCAccumulator,
    CCCReport,
    ccc,
    evaluate,
    parse_report_json,
    pearson,
    render_report,
)


def ccc_oracle(x, y):
    # straight from the definition, pure python sums
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    vx = math.fsum((a - mx) ** 2 for a in x) / n
    vy = math.fsum((b - my) ** 2 for b in y) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return 2 * cov / (vx + vy + (mx - my) ** 2)


def test_closed_form_cases():
    assert ccc([1, 2, 3], [1, 2, 3]) == 1.0
    assert ccc([1, 2, 3], [3, 2, 1]) == -1.0
    assert ccc([0, 0, 0], [1, 1, 1]) == 0.0
    assert ccc([1, 3, 2], [2, 2, 5]) == ccc([2, 2, 5], [1, 3, 2])


def test_constant_equal_inputs_agree():
    assert ccc([0.3, 0.3], [0.3, 0.3]) == 1.0


def test_population_moments_pinned():
    # x=[0,1], y=[0,2]: var 0.25 / 1.0, cov 0.5, mean gap 0.5 -> 1/(1.5) = 2/3
    assert ccc([0, 1], [0, 2]) == pytest.approx(2 / 3, abs=1e-15)


def test_random_pairs_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 501))
        x = rng.normal(rng.normal(), rng.uniform(0.1, 3), n)
        y = 0.5 * x + rng.normal(rng.normal(), 1, n)
        assert abs(ccc(x, y) - ccc_oracle(x.tolist(), y.tolist())) < 1e-10


def test_errors():
    with pytest.raises(ShapeError):
        ccc([1, 2, 3], [1, 2])
    with pytest.raises(InsufficientDataError):
        ccc([1.0], [1.0])


def test_shift_and_scale_sensitivity():
    x = np.array([0.1, -0.4, 0.7, 0.2])
    assert ccc(x, x + 0.3) < 1
    assert pearson(x, x + 0.3) == pytest.approx(1.0)
    assert ccc(x, 2 * x) < 1


vec = arrays(np.float64, st.integers(3, 40), elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(vec, st.integers(0, 2**32 - 1))
def test_properties(x, seed):
    y = x + np.random.default_rng(seed).normal(0, 1, x.size)
    if np.ptp(x) > 1e-6 and np.ptp(y) > 1e-6:
        assert ccc(x, x) == pytest.approx(1.0)
        assert abs(ccc(x, y)) <= abs(pearson(x, y)) + 1e-12
    assert ccc(x, y) == ccc(y, x)
    assert -1 <= ccc(x, y) <= 1


def test_accumulator_sharding():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=1000), rng.normal(size=1000) + 0.2
    full = ccc(x, y)
    acc = CCCAccumulator()
    for chunk in np.array_split(np.arange(1000), 7):
        acc.update(x[chunk], y[chunk])
    assert abs(acc.value() - full) < 1e-9
    left = CCCAccumulator().update(x[:300], y[:300])
    right = CCCAccumulator().update(x[300:], y[300:])
    assert abs(left.merge(right).value() - full) < 1e-9


def test_report_invariants():
    with pytest.raises(InsufficientDataError):
        CCCReport("e", "d", 0.1, 0.1, 1)
    with pytest.raises(ValueError):
        CCCReport("e", "d", 1.5, 0.1, 5)


PUBLISHED_CELLS = {
    "AffectNet / Scratch": (0.46, 0.61, 0.18, 0.16),
    "MaskedAffectNet / Scratch": (0.25, 0.33, 0.43, 0.48),
    "AffectNet -> MaskedAffectNet / Last Conv": (0.34, 0.39, 0.33, 0.43),
    "AffectNet -> MaskedAffectNet / All Layers": (0.38, 0.45, 0.45, 0.53),
}


def test_render_published_cells():
    reports = []
    for exp, (a1, v1, a2, v2) in PUBLISHED_CELLS.items():
        reports.append(CCCReport(exp, "AffectNet", a1, v1, 100))
        reports.append(CCCReport(exp, "MaskedAffectNet", a2, v2, 100))
    table, payload = render_report(reports)
    lines = table.splitlines()
    assert len(lines) == 3 + 4
    row = next(l for l in lines if l.startswith("AffectNet / Scratch"))
    assert [c.strip() for c in row.split("|")[1:]] == ["0.46", "0.61", "0.18", "0.16"]
    assert parse_report_json(payload) == reports


def test_render_single_report():
    table, payload = render_report([CCCReport("only", "D", 0.123, -0.5, 3)])
    body = table.splitlines()[3:]
    assert len(body) == 1
    assert [c.strip() for c in body[0].split("|")[1:]] == ["0.12", "-0.50"]
    assert json.loads(payload)[0]["ccc_arousal"] == 0.123


def test_render_missing_cell_and_empty():
    table, _ = render_report([CCCReport("a", "D1", 0.1, 0.2, 3), CCCReport("b", "D2", 0.3, 0.4, 3)])
    assert "-" in table.splitlines()[3].split("|")[3]
    with pytest.raises(ValueError):
        render_report([])


class LabelEcho(torch.nn.Module):
    """Looks its labels up from a pixel that encodes the sample index."""

    def __init__(self, arousal, valence):
        super().__init__()
        self.a = torch.as_tensor(arousal, dtype=torch.float32)
        self.v = torch.as_tensor(valence, dtype=torch.float32)

    def forward(self, x):
        idx = x[:, 0, 0, 0].round().long()
        return self.a[idx], self.v[idx]


class Constant(torch.nn.Module):
    def forward(self, x):
        z = torch.full((x.shape[0],), 0.25)
        return z, z


def _loaded(n=20, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, n)
    v = rng.uniform(-1, 1, n)
    images = torch.zeros(n, 1, 4, 4)
    images[:, 0, 0, 0] = torch.arange(n, dtype=torch.float32)
    return LoadedDataset(images, torch.tensor(a, dtype=torch.float32), torch.tensor(v, dtype=torch.float32), "toy")


def test_evaluate_oracle_and_constant_models():
    data = _loaded()
    echo = evaluate(LabelEcho(data.arousal, data.valence), data, "echo")
    assert echo.ccc_arousal == pytest.approx(1.0, abs=1e-12)
    assert echo.ccc_valence == pytest.approx(1.0, abs=1e-12)
    assert echo.n == 20 and echo.dataset == "toy"
    const = evaluate(Constant(), data, "const")
    assert const.ccc_arousal == 0.0 and const.ccc_valence == 0.0


def test_evaluate_batch_invariance(faces):
    from facechannel.model import build_model
    from conftest import SMALL

    model = build_model(SMALL, seed=0)
    r1 = evaluate(model, faces, "m", "faces", batch_size=1)
    r32 = evaluate(model, faces, "m", "faces", batch_size=32)
    assert abs(r1.ccc_arousal - r32.ccc_arousal) < 1e-6
    assert abs(r1.ccc_valence - r32.ccc_valence) < 1e-6
    assert evaluate(model, faces, "m", "faces") == evaluate(model, faces, "m", "faces")


def test_evaluate_empty_manifest():
    with pytest.raises(InsufficientDataError):
        evaluate(Constant(), DatasetManifest(()))
