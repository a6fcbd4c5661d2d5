"""Overlap metrics, fold management, volume-feature classification and trends."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import StandardScaler

from .data import N_STRUCTURES, STRUCTURES, DatasetSplit
from .errors import BadCount, DegenerateClass, DegenerateVariance, ShapeMismatch


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|); two empty masks count as perfect (1.0)."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class DscReport:
    per_structure: dict[str, float]
    overall: float                 # all 7 structures merged into one foreground
    mean_structures: float         # plain mean of the per-structure values
    subject_id: str = ""
    age: float = math.nan
    cdr: float = math.nan

    def row(self) -> list[float]:
        """Total, the 7 structures in canonical order, then the mean."""
        return ([self.overall]
                + [self.per_structure[s] for s in STRUCTURES]
                + [self.mean_structures])


def dsc_report(pred: np.ndarray, ref: np.ndarray, subject_id: str = "",
               age: float = math.nan, cdr: float = math.nan) -> DscReport:
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"label map shapes differ: {pred.shape} vs {ref.shape}")
    if pred.min() < 0 or pred.max() > N_STRUCTURES or ref.max() > N_STRUCTURES:
        raise ValueError("label maps must hold class ids 0..7")
    per = {name: dsc(pred == c + 1, ref == c + 1)
           for c, name in enumerate(STRUCTURES)}
    return DscReport(
        per_structure=per,
        overall=dsc(pred > 0, ref > 0),
        mean_structures=float(np.mean(list(per.values()))),
        subject_id=subject_id, age=age, cdr=cdr,
    )


def make_folds(subjects: list[str], k: int = 5, seed: int = 0,
               labelled_budget: int | None = None) -> list[DatasetSplit]:
    """Seeded shuffle, then k test blocks; every subject is tested exactly once."""
    if len(set(subjects)) != len(subjects):
        raise BadCount("subject ids must be unique")
    if k < 2 or len(subjects) % k != 0:
        raise BadCount(f"{len(subjects)} subjects do not divide into {k} folds")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    block = len(subjects) // k
    folds = []
    for f in range(k):
        test = order[f * block:(f + 1) * block]
        train = [s for s in order if s not in test]
        budget = labelled_budget if labelled_budget is not None else len(train)
        folds.append(DatasetSplit(fold_id=f, train_ids=train, test_ids=test,
                                  labelled_budget=budget,
                                  labelled_subset=train[:budget]))
    return folds


def subset_budget(split: DatasetSplit, budget: int) -> DatasetSplit:
    return DatasetSplit(fold_id=split.fold_id, train_ids=split.train_ids,
                        test_ids=split.test_ids, labelled_budget=budget,
                        labelled_subset=split.train_ids[:budget])


def volumes_from_seg(label_map: np.ndarray, spacing=1.0) -> np.ndarray:
    """Per-structure volume vector: voxel counts times the voxel volume."""
    label_map = np.asarray(label_map)
    if label_map.max(initial=0) > N_STRUCTURES or label_map.min(initial=0) < 0:
        raise ValueError("label maps must hold class ids 0..7")
    voxel = float(np.prod(spacing)) if np.ndim(spacing) else float(spacing) ** 3
    counts = np.array([(label_map == c + 1).sum() for c in range(N_STRUCTURES)],
                      dtype=np.float64)
    return counts * voxel


@dataclass
class ClassifierResult:
    accuracies: np.ndarray         # one value per repeat, in percent
    aucs: np.ndarray
    repeats: int
    folds: int
    extra: dict = field(default_factory=dict)

    @property
    def accuracy_mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def accuracy_std(self) -> float:
        return float(self.accuracies.std())

    @property
    def auc_mean(self) -> float:
        return float(self.aucs.mean())

    @property
    def auc_std(self) -> float:
        return float(self.aucs.std())


def classify_cdr(features: np.ndarray, labels: np.ndarray, repeats: int = 100,
                 folds: int = 5, seed: int = 0, c_reg: float = 1.0,
                 permute: bool = False) -> ClassifierResult:
    """Repeated stratified CV of an L2 logistic regression on volume features.

    Features are standardized inside each training fold; per repeat the
    out-of-fold predictions are pooled into one accuracy and one AUC. With
    permute=True each repeat shuffles the labels with its own seed: the null
    calibration whose mean AUC should sit at chance.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeMismatch("features and labels disagree")
    if x.shape[0] < 10:
        raise DegenerateClass("need at least 10 samples")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) != 2 or counts.min() < folds:
        raise DegenerateClass(
            "need both classes with at least one member per training fold"
        )
    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    accs = np.zeros(repeats)
    aucs = np.zeros(repeats)
    for r in range(repeats):
        rs = int(seeds[r] % (2 ** 31 - 1))
        y_r = y
        if permute:
            y_r = np.random.default_rng(seeds[r]).permutation(y)
        cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=rs)
        oof_prob = np.zeros(len(y_r))
        oof_pred = np.zeros(len(y_r), dtype=int)
        for tr, te in cv.split(x, y_r):
            scaler = StandardScaler().fit(x[tr])
            model = LogisticRegression(penalty="l2", C=c_reg, max_iter=1000)
            model.fit(scaler.transform(x[tr]), y_r[tr])
            prob = model.predict_proba(scaler.transform(x[te]))[:, 1]
            oof_prob[te] = prob
            oof_pred[te] = (prob >= 0.5).astype(int)
        accs[r] = 100.0 * float((oof_pred == y_r).mean())
        aucs[r] = float(roc_auc_score(y_r, oof_prob))
    return ClassifierResult(accuracies=accs, aucs=aucs, repeats=repeats,
                            folds=folds, extra={"permuted": permute})


def paired_ttest(a, b, alpha: float = 0.05) -> tuple[float, bool]:
    """Two-tailed paired t-test; identical inputs return p=1 by convention."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ShapeMismatch("need two equal-length samples of size >= 2")
    diffs = a - b
    if np.all(diffs == diffs[0]):
        if diffs[0] == 0.0:
            return 1.0, False
        raise DegenerateVariance("constant nonzero differences have no t-statistic")
    t, p = stats.ttest_rel(a, b)
    return float(p), bool(p < alpha)


def kernel_regression(x, y, bandwidth: float | None = None,
                      grid: np.ndarray | None = None, n_grid: int = 100):
    """Nadaraya-Watson smoothing with a Gaussian kernel on a uniform grid.

    Returns (grid, estimate, supported); grid points effectively out of reach
    of the data are flagged unsupported and pinned to the nearest observation.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or x.size != y.size:
        raise ShapeMismatch("x and y must be non-empty and equally long")
    span = x.max() - x.min()
    if bandwidth is None:
        bandwidth = 0.1 * span if span > 0 else 1.0
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if grid is None:
        grid = (np.linspace(x.min(), x.max(), n_grid) if span > 0
                else np.array([x[0]]))
    w = np.exp(-0.5 * ((grid[:, None] - x[None, :]) / bandwidth) ** 2)
    norm = w.sum(axis=1)
    supported = norm > 1e-12
    est = np.empty(grid.shape)
    est[supported] = (w[supported] @ y) / norm[supported]
    if (~supported).any():
        nearest = np.abs(grid[~supported, None] - x[None, :]).argmin(axis=1)
        est[~supported] = y[nearest]
    return grid, est, supported
