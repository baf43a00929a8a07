"""Concordance correlation coefficient and table-shaped reporting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import InsufficientDataError, ShapeError

CONSTANT_TOL = 1e-12


def ccc(predictions, targets) -> float:
    """Lin's concordance correlation coefficient with population moments.

    When both inputs are constant the formula is 0/0; this returns 1.0 if
    the two constants agree within 1e-12 and 0.0 otherwise.
    """
    x = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.size} predictions vs {y.size} targets")
    if x.size < 2:
        raise InsufficientDataError("CCC needs at least 2 samples")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    if vx == 0.0 and vy == 0.0:
        return 1.0 if abs(mx - my) <= CONSTANT_TOL else 0.0
    cov = np.mean(dx * dy)
    value = 2.0 * cov / (vx + vy + (mx - my) ** 2)
    return float(min(1.0, max(-1.0, value)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.corrcoef(x, y)[0, 1])


class CCCAccumulator:
    """Streaming first/second moments (Chan et al. pairwise update), so that
    sharded evaluation can be merged without revisiting the data."""

    def __init__(self):
        self.n = 0
        self.mean_x = 0.0
        self.mean_y = 0.0
        self.m2_x = 0.0
        self.m2_y = 0.0
        self.c_xy = 0.0

    def update(self, x, y) -> "CCCAccumulator":
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        if x.shape != y.shape:
            raise ShapeError("length mismatch")
        if x.size == 0:
            return self
        other = CCCAccumulator()
        other.n = x.size
        other.mean_x, other.mean_y = x.mean(), y.mean()
        dx, dy = x - other.mean_x, y - other.mean_y
        other.m2_x, other.m2_y, other.c_xy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
        return self.merge(other)

    def merge(self, other: "CCCAccumulator") -> "CCCAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.__dict__.update(other.__dict__)
            return self
        n = self.n + other.n
        dx = other.mean_x - self.mean_x
        dy = other.mean_y - self.mean_y
        w = self.n * other.n / n
        self.m2_x += other.m2_x + dx * dx * w
        self.m2_y += other.m2_y + dy * dy * w
        self.c_xy += other.c_xy + dx * dy * w
        self.mean_x += dx * other.n / n
        self.mean_y += dy * other.n / n
        self.n = n
        return self

    def value(self) -> float:
        if self.n < 2:
            raise InsufficientDataError("CCC needs at least 2 samples")
        vx, vy = self.m2_x / self.n, self.m2_y / self.n
        if vx == 0.0 and vy == 0.0:
            return 1.0 if abs(self.mean_x - self.mean_y) <= CONSTANT_TOL else 0.0
        value = 2.0 * (self.c_xy / self.n) / (vx + vy + (self.mean_x - self.mean_y) ** 2)
        return float(min(1.0, max(-1.0, value)))


@dataclass(frozen=True)
class CCCReport:
    experiment: str
    dataset: str
    ccc_arousal: float
    ccc_valence: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise InsufficientDataError("a report needs n >= 2")
        for v in (self.ccc_arousal, self.ccc_valence):
            if not (-1.0 <= v <= 1.0):
                raise ValueError(f"CCC value {v} outside [-1, 1]")

    @property
    def mean(self) -> float:
        return 0.5 * (self.ccc_arousal + self.ccc_valence)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CCCReport":
        return cls(
            experiment=str(d["experiment"]),
            dataset=str(d["dataset"]),
            ccc_arousal=float(d["ccc_arousal"]),
            ccc_valence=float(d["ccc_valence"]),
            n=int(d["n"]),
        )


@torch.no_grad()
def predict(model, images: torch.Tensor, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Run the model over ``images`` in input order."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    arousal, valence = [], []
    try:
        for start in range(0, images.shape[0], batch_size):
            a, v = model(images[start : start + batch_size])
            arousal.append(torch.as_tensor(a).detach().double().reshape(-1))
            valence.append(torch.as_tensor(v).detach().double().reshape(-1))
    finally:
        if was_training:
            model.train()
    return torch.cat(arousal).numpy(), torch.cat(valence).numpy()


def evaluate(
    model,
    data,
    experiment: str = "",
    dataset: str | None = None,
    batch_size: int = 64,
    preprocess=None,
    jobs: int = 1,
) -> CCCReport:
    """Score ``model`` on a manifest (or an already-loaded dataset).

    Predictions are used raw, never clipped to the label range.
    """
    from .dataset import DatasetManifest, LoadedDataset, PreprocessConfig, load_dataset

    if isinstance(data, DatasetManifest):
        if len(data) < 2:
            raise InsufficientDataError("evaluation needs at least 2 samples")
        if preprocess is None:
            cfg = getattr(model, "config", None)
            preprocess = (
                PreprocessConfig(cfg.input_size, cfg.input_channels) if cfg is not None else PreprocessConfig()
            )
        data = load_dataset(data, preprocess, jobs=jobs, name=dataset or "")
    if not isinstance(data, LoadedDataset):
        raise TypeError(f"cannot evaluate on {type(data).__name__}")
    if len(data) < 2:
        raise InsufficientDataError("evaluation needs at least 2 samples")
    pa, pv = predict(model, data.images, batch_size)
    return CCCReport(
        experiment=experiment,
        dataset=dataset if dataset is not None else data.name,
        ccc_arousal=ccc(pa, data.arousal.numpy()),
        ccc_valence=ccc(pv, data.valence.numpy()),
        n=len(data),
    )


def render_report(reports: Sequence[CCCReport], digits: int = 2) -> tuple[str, str]:
    """Lay reports out with one row per experiment and an (Arousal, Valence)
    column pair per evaluation dataset. Returns ``(table_text, json_text)``."""
    if not reports:
        raise ValueError("no reports to render")
    experiments: list[str] = []
    datasets: list[str] = []
    cells = {}
    for r in reports:
        if r.experiment not in experiments:
            experiments.append(r.experiment)
        if r.dataset not in datasets:
            datasets.append(r.dataset)
        cells[(r.experiment, r.dataset)] = r

    def fmt(v):
        return f"{v:.{digits}f}"

    exp_w = max(len("Experiment"), *(len(e) for e in experiments))
    col_w = max(digits + 3, len("Arousal"), len("Valence"))
    pair_w = 2 * col_w + 3
    ds_w = [max(pair_w, len(d)) for d in datasets]

    head1 = "Experiment".ljust(exp_w) + "".join(" | " + d.center(w) for d, w in zip(datasets, ds_w))
    head2 = " " * exp_w + "".join(
        " | " + ("Arousal".rjust(col_w) + " | " + "Valence".rjust(col_w)).rjust(w) for w in ds_w
    )
    lines = [head1, head2, "-" * len(head1)]
    for e in experiments:
        row = e.ljust(exp_w)
        for d, w in zip(datasets, ds_w):
            r = cells.get((e, d))
            a, v = (fmt(r.ccc_arousal), fmt(r.ccc_valence)) if r else ("-", "-")
            row += " | " + (a.rjust(col_w) + " | " + v.rjust(col_w)).rjust(w)
        lines.append(row)
    table = "\n".join(lines)
    payload = json.dumps([r.to_dict() for r in reports], indent=2)
    return table, payload


def parse_report_json(text: str) -> list[CCCReport]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [CCCReport.from_dict(d) for d in data]

