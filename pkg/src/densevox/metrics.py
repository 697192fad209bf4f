"""Dice evaluation over the aggregated lesion regions."""

import numpy as np

from .infer import aggregate_regions

REGIONS = ("complete", "core", "enhancing")


def dice(prediction, truth):
    """Dice = 2TP / (FN + FP + 2TP); two empty masks score 1.0 by convention."""
    prediction = np.asarray(prediction, bool)
    truth = np.asarray(truth, bool)
    if prediction.shape != truth.shape:
        raise ValueError(f"mask extents differ: {prediction.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(prediction & truth))
    fp = int(np.count_nonzero(prediction & ~truth))
    fn = int(np.count_nonzero(~prediction & truth))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (fn + fp + 2.0 * tp)


def evaluate(pred_labels, truth_labels):
    """Dice for each aggregated region of two {0,1,2,4} label maps."""
    pred_labels = np.asarray(pred_labels)
    truth_labels = np.asarray(truth_labels)
    if pred_labels.shape != truth_labels.shape:
        raise ValueError(f"label map extents differ: {pred_labels.shape} vs "
                         f"{truth_labels.shape}")
    pred = aggregate_regions(pred_labels)
    truth = aggregate_regions(truth_labels)
    return {r: dice(pred[r], truth[r]) for r in REGIONS}


def report_line(volume_id, scores):
    return (f"{volume_id} {scores['complete']:.6f} {scores['core']:.6f} "
            f"{scores['enhancing']:.6f}")


def write_report(path, rows):
    """One line per volume plus a mean row; ``rows`` is [(id, scores), ...]."""
    with open(path, "w") as f:
        for vid, scores in rows:
            f.write(report_line(vid, scores) + "\n")
        if rows:
            mean = {r: float(np.mean([s[r] for _, s in rows])) for r in REGIONS}
            f.write(report_line("mean", mean) + "\n")
    return path
