"""Classification metrics over a node mask."""

import numpy as np


def _hard(preds):
    preds = getattr(preds, "hard", preds)
    preds = np.asarray(preds)
    return np.argmax(preds, axis=1) if preds.ndim == 2 else preds.astype(np.int64)


def _select(preds, labels, mask):
    p, y = _hard(preds), np.asarray(labels, dtype=np.int64)
    if mask is None:
        return p, y
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    return p[idx], y[idx]


def accuracy(preds, labels, mask=None):
    p, y = _select(preds, labels, mask)
    if len(y) == 0:
        return 0.0
    return float(np.count_nonzero(p == y)) / len(y)


def per_class_prf(preds, labels, mask=None, num_classes=None):
    """Per-class precision, recall and F1 arrays.

    Undefined ratios (0/0) are 0. Classes are 0..num_classes-1; by default
    the range covers every class seen in either vector.
    """
    p, y = _select(preds, labels, mask)
    if num_classes is None:
        num_classes = int(max(p.max(initial=-1), y.max(initial=-1)) + 1)
    tp = np.bincount(y[p == y], minlength=num_classes).astype(float)
    pred_n = np.bincount(p, minlength=num_classes).astype(float)
    true_n = np.bincount(y, minlength=num_classes).astype(float)
    prec = np.divide(tp, pred_n, out=np.zeros(num_classes), where=pred_n > 0)
    rec = np.divide(tp, true_n, out=np.zeros(num_classes), where=true_n > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(num_classes), where=denom > 0)
    return prec, rec, f1


def macro_f1(preds, labels, mask=None, num_classes=None):
    return float(per_class_prf(preds, labels, mask, num_classes)[2].mean())


def macro_precision(preds, labels, mask=None, num_classes=None):
    return float(per_class_prf(preds, labels, mask, num_classes)[0].mean())


def macro_recall(preds, labels, mask=None, num_classes=None):
    return float(per_class_prf(preds, labels, mask, num_classes)[1].mean())
