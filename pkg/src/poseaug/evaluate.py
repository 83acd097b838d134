"""Classification protocol: linear probes over real and generated
embeddings, ROC sweeps, and confusion matrices.

Three experiments per target label (identity / pose / emotion):
  1. probe trained on 80% of the real test-identity embeddings, scored on
     the held-out 20%;
  2. probe trained and scored within the generated embeddings (80/20);
  3. probe trained on the real 80% plus all generated embeddings, scored
     on the same held-out 20% as experiment 1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SampleKey, SplitSpec
from .errors import ConfigError

TARGETS = ("identity", "pose", "emotion")


# -- linear probe ----------------------------------------------------------

@dataclass
class LinearProbe:
    """Multinomial logistic-regression probe (convex, deterministic)."""

    weights: np.ndarray  # (n_classes, dim)
    bias: np.ndarray     # (n_classes,)
    classes: list
    final_loss: float
    n_steps: int

    def scores(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias

    def predict(self, x: np.ndarray) -> list:
        idx = self.scores(x).argmax(axis=1)
        return [self.classes[i] for i in idx]

    def accuracy(self, x: np.ndarray, labels) -> float:
        pred = self.predict(x)
        return float(np.mean([p == t for p, t in zip(pred, labels)]))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(x: np.ndarray, labels, l2_penalty: float = 1e-3,
                seed: int = 0, max_steps: int = 5000,
                grad_tol: float = 1e-6) -> LinearProbe:
    """Full-batch gradient descent with backtracking line search on
    softmax cross-entropy + (l2/2)·||W||²."""
    x = np.asarray(x, dtype=np.float64)
    labels = list(labels)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ConfigError(
            f"probe needs at least 2 classes, got {classes}")
    index = {c: i for i, c in enumerate(classes)}
    n, dim = x.shape
    y = np.zeros((n, len(classes)))
    y[np.arange(n), [index[t] for t in labels]] = 1.0

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=(len(classes), dim))
    b = np.zeros(len(classes))

    def loss_and_grad(w, b):
        p = _softmax(x @ w.T + b)
        ce = -np.mean(np.sum(y * np.log(np.clip(p, 1e-300, None)), axis=1))
        loss = ce + 0.5 * l2_penalty * float((w ** 2).sum())
        gw = (p - y).T @ x / n + l2_penalty * w
        gb = (p - y).mean(axis=0)
        return loss, gw, gb

    loss, gw, gb = loss_and_grad(w, b)
    t = 1.0
    step = 0
    for step in range(1, max_steps + 1):
        gnorm_sq = float((gw ** 2).sum() + (gb ** 2).sum())
        if np.sqrt(gnorm_sq) < grad_tol:
            break
        t = min(t * 2.0, 1e4)
        while True:
            w_new, b_new = w - t * gw, b - t * gb
            loss_new, gw_new, gb_new = loss_and_grad(w_new, b_new)
            if loss_new <= loss - 0.5 * t * gnorm_sq or t < 1e-12:
                break
            t *= 0.5
        w, b, loss, gw, gb = w_new, b_new, loss_new, gw_new, gb_new
    return LinearProbe(weights=w, bias=b, classes=classes,
                       final_loss=float(loss), n_steps=step)


# -- metrics ---------------------------------------------------------------

def confusion_matrix(labels, predictions, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(labels, predictions):
        m[index[t], index[p]] += 1
    return m


def roc_sweep(scores: np.ndarray, positives: np.ndarray):
    """One-vs-rest ROC: (thresholds, fpr, tpr, auc) over unique score cuts.

    Predicted positive when score >= threshold; ties share a threshold, so
    trapezoidal AUC equals the pairwise-comparison probability with half
    credit for ties.
    """
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    positives = positives[order]
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("ROC sweep needs both positives and negatives")
    thresholds = [np.inf]
    tps = [0]
    fps = [0]
    tp = fp = 0
    for i, (s, is_pos) in enumerate(zip(scores, positives)):
        tp += int(is_pos)
        fp += int(not is_pos)
        if i + 1 == len(scores) or scores[i + 1] != s:
            thresholds.append(s)
            tps.append(tp)
            fps.append(fp)
    tpr = np.array(tps) / n_pos
    fpr = np.array(fps) / n_neg
    auc = float(np.trapezoid(tpr, fpr))
    return np.array(thresholds), fpr, tpr, auc


def roc_points(probe: LinearProbe, x: np.ndarray, labels) -> dict:
    """Per-class one-vs-rest curves plus macro AUC.

    Classes the probe knows but that are absent from `labels` are excluded
    with a warning.
    """
    labels = list(labels)
    present = set(labels)
    scores = probe.scores(np.asarray(x))
    per_class = {}
    aucs = []
    for ci, cls in enumerate(probe.classes):
        if cls not in present:
            warnings.warn(f"class {cls!r} absent from labels; excluded from ROC")
            continue
        pos = np.array([t == cls for t in labels])
        thr, fpr, tpr, auc = roc_sweep(scores[:, ci], pos)
        per_class[cls] = {"thresholds": thr, "fpr": fpr, "tpr": tpr, "auc": auc}
        aucs.append(auc)
    return {"per_class": per_class, "macro_auc": float(np.mean(aucs))}


# -- protocol --------------------------------------------------------------

@dataclass
class EvalReport:
    """Accuracies for the 3×3 experiment grid plus ROC/confusion blocks."""

    accuracies: dict            # target -> {"exp1": .., "exp2": .., "exp3": ..}
    roc: dict                   # target -> roc_points output (exp-3 probe)
    confusion: dict             # target -> {"classes": [..], "matrix": ndarray}
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "accuracies": self.accuracies,
            "roc": {
                target: {
                    "macro_auc": block["macro_auc"],
                    "per_class_auc": {str(c): v["auc"]
                                      for c, v in block["per_class"].items()},
                } for target, block in self.roc.items()
            },
            "confusion": {
                target: {"classes": [str(c) for c in blk["classes"]],
                         "matrix": blk["matrix"].tolist()}
                for target, blk in self.confusion.items()
            },
            "metadata": self.metadata,
        }
        return json.dumps(doc, sort_keys=True, indent=2)


def _label_of(key: SampleKey, target: str) -> str:
    return getattr(key, target)


def stratified_split(labels, eval_fraction: float, seed: int):
    """Deterministic per-class 80/20-style split; returns index arrays."""
    rng = np.random.default_rng(seed)
    labels = list(labels)
    by_class: dict = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    train_idx, eval_idx = [], []
    for lab in sorted(by_class):
        idx = np.array(by_class[lab])
        idx = idx[rng.permutation(len(idx))]
        n_eval = max(1, int(round(eval_fraction * len(idx))))
        eval_idx.extend(idx[:n_eval])
        train_idx.extend(idx[n_eval:])
    return np.array(sorted(train_idx)), np.array(sorted(eval_idx))


def run_protocol(dataset: Dataset, split: SplitSpec, augment_fn,
                 seed: int = 0, l2_penalty: float = 1e-3,
                 eval_fraction: float = 0.2) -> EvalReport:
    """Run the three-experiment protocol on the test-identity samples.

    `augment_fn(pairs)` maps a list of (base_key, target_pose) to an array
    of generated unit-norm embeddings.
    """
    test_keys = dataset.keys_for_identities(split.test_identities)
    if not test_keys:
        raise ConfigError("test split is empty")
    x_real = np.stack([dataset.embeddings[k] for k in test_keys])

    # generated set: one augmentation per (test sample, other pose) pair
    pairs = []
    for key in test_keys:
        for pose in dataset.pose_set:
            if pose != key.pose:
                pairs.append((key, pose))
    x_aug = augment_fn(pairs)
    aug_keys = [SampleKey(k.identity, k.emotion, pose) for k, pose in pairs]

    accuracies: dict = {}
    roc: dict = {}
    confusion: dict = {}
    eval_indices: dict = {}
    for target in TARGETS:
        real_labels = [_label_of(k, target) for k in test_keys]
        aug_labels = [_label_of(k, target) for k in aug_keys]
        train_idx, eval_idx = stratified_split(real_labels, eval_fraction, seed)
        x_train, x_eval = x_real[train_idx], x_real[eval_idx]
        y_train = [real_labels[i] for i in train_idx]
        y_eval = [real_labels[i] for i in eval_idx]

        probe1 = train_probe(x_train, y_train, l2_penalty, seed)
        acc1 = probe1.accuracy(x_eval, y_eval)

        a_train_idx, a_eval_idx = stratified_split(aug_labels, eval_fraction, seed)
        probe2 = train_probe(x_aug[a_train_idx],
                             [aug_labels[i] for i in a_train_idx],
                             l2_penalty, seed)
        acc2 = probe2.accuracy(x_aug[a_eval_idx],
                               [aug_labels[i] for i in a_eval_idx])

        x_train3 = np.concatenate([x_train, x_aug])
        y_train3 = y_train + aug_labels
        probe3 = train_probe(x_train3, y_train3, l2_penalty, seed)
        acc3 = probe3.accuracy(x_eval, y_eval)

        accuracies[target] = {"exp1": acc1, "exp2": acc2, "exp3": acc3}
        # experiments 1 and 3 score on this same index set; recorded so
        # external audits can recompute both accuracies from scratch
        eval_indices[target] = [int(i) for i in eval_idx]
        roc[target] = roc_points(probe3, x_eval, y_eval)
        preds = probe3.predict(x_eval)
        confusion[target] = {
            "classes": probe3.classes,
            "matrix": confusion_matrix(y_eval, preds, probe3.classes),
        }

    metadata = {
        "seed": seed,
        "probe": "multinomial logistic regression (linear)",
        "experiment2_scoring": "held-out 20% of the generated set",
        "roc_and_confusion_source": "experiment-3 probe on the shared eval set",
        "test_identities": list(split.test_identities),
        "n_test_samples": len(test_keys),
        "n_generated": len(aug_keys),
        "eval_indices": eval_indices,
    }
    if dataset.factor_truth is not None:
        truth = dataset.factor_truth
        targets = np.stack([truth.target(*k) for k in aug_keys])
        bases = np.stack([dataset.embeddings[k] for k, _ in pairs])
        metadata["oracle_cosine_augmented"] = float(
            np.mean(np.sum(x_aug * targets, axis=1)))
        metadata["oracle_cosine_base"] = float(
            np.mean(np.sum(bases * targets, axis=1)))
    return EvalReport(accuracies=accuracies, roc=roc, confusion=confusion,
                      metadata=metadata)
