"""Evaluation: cross-modal retrieval, zero-shot spatial probes, downstream
MLP probes, embedding-arithmetic direction swaps, and DOA error breakdowns.

Everything here operates on frozen numpy embedding matrices; the only
training is the small probe MLPs (via the autodiff engine).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .captions import probe_caption

DIRECTION_CLASSES = ("left", "right", "front", "back")


class DegenerateSplitError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalReport:
    """R@k and mAP@10 for both retrieval directions over aligned pairs."""

    a2t: dict
    t2a: dict
    n: int

    def as_dict(self) -> dict:
        return {"a2t": self.a2t, "t2a": self.t2a, "n": self.n}


def _ranks_of_diagonal(sim: np.ndarray) -> np.ndarray:
    """Rank (1-based) of the matched item per query row; ties count against."""
    diag = np.diagonal(sim)
    return 1 + (sim > diag[:, None]).sum(axis=1)


def _direction_metrics(ranks: np.ndarray) -> dict:
    return {
        "r1": float(np.mean(ranks <= 1)),
        "r5": float(np.mean(ranks <= 5)),
        "r10": float(np.mean(ranks <= 10)),
        "map10": float(np.mean(np.where(ranks <= 10, 1.0 / ranks, 0.0))),
    }


def retrieval_report(Za: np.ndarray, Zt: np.ndarray) -> RetrievalReport:
    """Cosine retrieval both ways; mAP@10 is reciprocal rank truncated at 10
    (each query has exactly one relevant item)."""
    Za = np.asarray(Za, dtype=float)
    Zt = np.asarray(Zt, dtype=float)
    if Za.shape != Zt.shape:
        raise ValueError(f"embedding sets differ in shape: {Za.shape} vs {Zt.shape}")
    if len(Za) < 1:
        raise ValueError("need at least one pair")
    an = Za / np.maximum(np.linalg.norm(Za, axis=1, keepdims=True), 1e-12)
    tn = Zt / np.maximum(np.linalg.norm(Zt, axis=1, keepdims=True), 1e-12)
    sim = an @ tn.T
    return RetrievalReport(
        a2t=_direction_metrics(_ranks_of_diagonal(sim)),
        t2a=_direction_metrics(_ranks_of_diagonal(sim.T)),
        n=len(Za),
    )


# ---------------------------------------------------------------- zero-shot


def zeroshot_classify(
    embeddings: np.ndarray, labels: list[str], probes: dict[str, np.ndarray]
) -> tuple[float, dict]:
    """Nearest-probe-by-cosine classification.

    Returns (accuracy, confusion) over samples whose label is among the
    probe classes; raises if a sample label has no probe.
    """
    classes = sorted(probes.keys())
    missing = set(labels) - set(classes)
    if missing:
        raise KeyError(f"labels without probe captions: {sorted(missing)}")
    P = np.stack([probes[c] / np.linalg.norm(probes[c]) for c in classes])
    E = np.asarray(embeddings, dtype=float)
    E = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
    pred_idx = np.argmax(E @ P.T, axis=1)
    confusion = {t: {p: 0 for p in classes} for t in classes}
    correct = 0
    for lbl, pi in zip(labels, pred_idx):
        pred = classes[pi]
        confusion[lbl][pred] += 1
        correct += pred == lbl
    return correct / len(labels), confusion


def build_probe_embeddings(text_encode_fn, classes) -> dict[str, np.ndarray]:
    """Encode the templated probe caption for each class label."""
    return {c: np.asarray(text_encode_fn(probe_caption(c)), dtype=float) for c in classes}


# ------------------------------------------------------------- MLP probes


@dataclass
class MLPProbe:
    """Two-layer probe over frozen embeddings."""

    task: str
    classes: tuple[str, ...] | None
    params: dict[str, nn.Tensor]

    def _forward(self, x: nn.Tensor) -> nn.Tensor:
        h = nn.relu(nn.linear(x, self.params["w1"], self.params["b1"]))
        return nn.linear(h, self.params["w2"], self.params["b2"])

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        out = self._forward(nn.tensor(np.asarray(embeddings, dtype=float)))
        if self.task == "doa_regression":
            return nn.l2_normalize(out).data
        return np.argmax(out.data, axis=1)

    def predict_labels(self, embeddings: np.ndarray) -> list[str]:
        if self.classes is None:
            raise ValueError("regression probe has no classes")
        idx = self.predict(embeddings)
        return [self.classes[i] for i in idx]


def angular_error_deg(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Great-circle angle between unit vectors, elementwise over rows."""
    u = np.atleast_2d(u)
    v = np.atleast_2d(v)
    dots = np.clip(np.sum(u * v, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def train_probe(
    train_embeddings: np.ndarray,
    train_targets,
    test_embeddings: np.ndarray,
    test_targets,
    task: str,
    hidden: int = 64,
    epochs: int = 400,
    lr: float = 3e-3,
    seed: int = 0,
) -> tuple[MLPProbe, dict]:
    """Train a 2-layer MLP on frozen embeddings and report test metrics.

    Tasks: doa_regression (targets = unit 3-vectors, metric MAE degrees),
    direction_4class / distance_2class (targets = labels, metric accuracy).
    """
    Xtr = np.asarray(train_embeddings, dtype=float)
    Xte = np.asarray(test_embeddings, dtype=float)
    if len(Xtr) == 0 or len(Xte) == 0:
        raise DegenerateSplitError("empty probe split")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x9806)))
    classes: tuple[str, ...] | None = None
    if task == "doa_regression":
        out_dim = 3
        Ttr = np.asarray(train_targets, dtype=float)
        Tte = np.asarray(test_targets, dtype=float)
    elif task in ("direction_4class", "distance_2class"):
        classes = tuple(sorted(set(train_targets)))
        if len(classes) < 2:
            raise DegenerateSplitError(f"probe task {task} needs >= 2 classes, got {classes}")
        out_dim = len(classes)
        lut = {c: i for i, c in enumerate(classes)}
        missing = set(test_targets) - set(classes)
        if missing:
            raise DegenerateSplitError(f"test classes unseen in train: {sorted(missing)}")
        ytr = np.array([lut[t] for t in train_targets])
        yte = np.array([lut[t] for t in test_targets])
    else:
        raise ValueError(f"unknown probe task {task!r}")

    d = Xtr.shape[1]
    params = {
        "w1": nn.parameter(rng.standard_normal((hidden, d)) * math.sqrt(2.0 / d)),
        "b1": nn.parameter(np.zeros(hidden)),
        "w2": nn.parameter(rng.standard_normal((out_dim, hidden)) * math.sqrt(2.0 / hidden)),
        "b2": nn.parameter(np.zeros(out_dim)),
    }
    probe = MLPProbe(task=task, classes=classes, params=params)
    opt = nn.Adam(params, nn.CosineSchedule(lr, lr * 0.01, epochs))
    Xt = nn.tensor(Xtr)

    for _ in range(epochs):
        out = probe._forward(Xt)
        if task == "doa_regression":
            pred = nn.l2_normalize(out)
            cos = nn.sum_(nn.mul(pred, nn.tensor(Ttr)), axis=1)
            loss = nn.mean(nn.add_const(nn.neg(cos), 1.0))
        else:
            lse = nn.logsumexp(out, axis=1)
            picked = nn.sum_(nn.mul(out, nn.tensor(np.eye(out_dim)[ytr])), axis=1)
            loss = nn.mean(nn.sub(lse, picked))
        opt.zero_grad()
        nn.backward(loss)
        opt.step()

    if task == "doa_regression":
        pred = probe.predict(Xte)
        metrics = {"mae_deg": float(np.mean(angular_error_deg(pred, Tte)))}
    else:
        pred_idx = probe.predict(Xte)
        metrics = {"accuracy": float(np.mean(pred_idx == yte))}
    return probe, metrics


# --------------------------------------------------------- direction swaps


@dataclass(frozen=True)
class DirectionPrototypes:
    """Unit text embeddings of the four directional probe captions."""

    embeddings: dict[str, np.ndarray]

    def __post_init__(self):
        for k in DIRECTION_CLASSES:
            if k not in self.embeddings:
                raise ValueError(f"missing direction prototype {k!r}")
        for k, v in self.embeddings.items():
            n = np.linalg.norm(v)
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"prototype {k!r} not unit norm ({n})")

    @classmethod
    def from_text_encoder(cls, text_encode_fn) -> "DirectionPrototypes":
        protos = {}
        for c in DIRECTION_CLASSES:
            v = np.asarray(text_encode_fn(probe_caption(c)), dtype=float)
            protos[c] = v / np.linalg.norm(v)
        return cls(protos)


def direction_swap(
    embedding: np.ndarray,
    old: str,
    new: str,
    protos: DirectionPrototypes,
    classify_fn,
) -> tuple[np.ndarray, bool]:
    """Subtract the old direction prototype, add the new one, re-normalize,
    and report whether the classifier now says `new`."""
    v = np.asarray(embedding, dtype=float)
    moved = v - protos.embeddings[old] + protos.embeddings[new]
    moved = moved / np.linalg.norm(moved)
    return moved, classify_fn(moved) == new


def direction_removal(
    embedding: np.ndarray, old: str, protos: DirectionPrototypes, classify_fn
) -> tuple[np.ndarray, bool]:
    """Subtract the old prototype only; reports whether the classifier still
    says `old` (the published ablation observes it essentially never does)."""
    v = np.asarray(embedding, dtype=float)
    moved = v - protos.embeddings[old]
    moved = moved / np.linalg.norm(moved)
    return moved, classify_fn(moved) == old


def swap_experiment(
    embeddings: np.ndarray,
    labels: list[str],
    protos: DirectionPrototypes,
    classifier: MLPProbe,
) -> dict:
    """Full swap/removal protocol over a labeled test set.

    Misclassified samples are excluded up front; every correctly-classified
    sample is swapped to each other direction and also direction-removed.
    """
    preds = classifier.predict_labels(embeddings)
    keep = [i for i, (p, t) in enumerate(zip(preds, labels)) if p == t]
    excluded = len(labels) - len(keep)
    classify_one = lambda v: classifier.predict_labels(v[None])[0]

    swaps_total = swaps_ok = 0
    removal_total = removal_still_old = 0
    per_pair: dict[str, dict[str, float]] = {}
    for old in DIRECTION_CLASSES:
        idx = [i for i in keep if labels[i] == old]
        if not idx:
            continue
        for new in DIRECTION_CLASSES:
            if new == old:
                continue
            ok = 0
            for i in idx:
                _, hit = direction_swap(embeddings[i], old, new, protos, classify_one)
                ok += hit
            per_pair.setdefault(old, {})[new] = ok / len(idx)
            swaps_ok += ok
            swaps_total += len(idx)
        for i in idx:
            _, still = direction_removal(embeddings[i], old, protos, classify_one)
            removal_still_old += still
            removal_total += 1

    return {
        "classifier_accuracy": len(keep) / len(labels),
        "excluded_misclassified": excluded,
        "n_swapped": swaps_total,
        "swap_success_rate": swaps_ok / swaps_total if swaps_total else float("nan"),
        "removal_original_rate": removal_still_old / removal_total if removal_total else float("nan"),
        "per_pair": per_pair,
    }


# --------------------------------------------------------- DOA breakdown


BREAKDOWN_DIMENSIONS = (
    ("azimuth_deg", "Azimuth (deg)"),
    ("elevation_deg", "Elevation (deg)"),
    ("distance_m", "Distance (m)"),
    ("floor_area_m2", "Floor area (m2)"),
    ("t30_ms", "T30 (ms)"),
)


def doa_error_breakdown(
    pred_dirs: np.ndarray, target_dirs: np.ndarray, attributes: list, num_bins: int = 10
) -> dict:
    """Mean/std/count of absolute DOA error binned along each attribute."""
    pred = np.asarray(pred_dirs, dtype=float)
    target = np.asarray(target_dirs, dtype=float)
    if len(pred) != len(target) or len(pred) != len(attributes):
        raise ValueError("predictions, targets, attributes must align")
    errors = angular_error_deg(pred, target)
    out = {"n": len(errors), "mae_deg": float(errors.mean()), "dimensions": {}}
    for key, label in BREAKDOWN_DIMENSIONS:
        vals = np.array([getattr(a, key) for a in attributes], dtype=float)
        lo, hi = float(vals.min()), float(vals.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, num_bins + 1)
        rows = []
        for b in range(num_bins):
            mask = (vals >= edges[b]) & (vals < edges[b + 1] if b < num_bins - 1 else vals <= edges[b + 1])
            cnt = int(mask.sum())
            rows.append(
                {
                    "range": [float(edges[b]), float(edges[b + 1])],
                    "mean": float(errors[mask].mean()) if cnt else None,
                    "std": float(errors[mask].std()) if cnt else None,
                    "count": cnt,
                }
            )
        out["dimensions"][key] = {"label": label, "bins": rows}
    return out


def breakdown_table(breakdown: dict) -> str:
    """Aligned-column text rendering of the binned DOA error report."""
    lines = [f"DOA error breakdown over {breakdown['n']} samples "
             f"(MAE {breakdown['mae_deg']:.2f} deg)"]
    for key, dim in breakdown["dimensions"].items():
        lines.append("")
        lines.append(dim["label"])
        lines.append(f"  {'range':>24s} {'mean':>8s} {'std':>8s} {'count':>7s}")
        for row in dim["bins"]:
            lo, hi = row["range"]
            mean = f"{row['mean']:8.2f}" if row["mean"] is not None else "       -"
            std = f"{row['std']:8.2f}" if row["std"] is not None else "       -"
            lines.append(f"  [{lo:10.2f}, {hi:10.2f}) {mean} {std} {row['count']:7d}")
    return "\n".join(lines)
