#!/usr/bin/env python3
"""Generates metrics_golden.json.

Each case lists predictions, ground truths and the hand-reasoned matching
(pairs are forced by construction: clusters sit >100 px apart with radius 16,
and within-cluster choices are unambiguous minima). This script only turns
the hand-computed counts and distances into IEEE-double aggregates using the
same formula shapes as the scorer: P = tp/(tp+fp), R = tp/(tp+fn),
F1 = 2*P*R/(P+R), mu = sum(d)/n in ground-truth order,
sigma = sqrt(sum((d-mu)^2)/n).
"""

import json
import math


def f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def ratio(num, den):
    return num / den if den > 0 else 0.0


def dist(p, g):
    dx = p[0] - g[0]
    dy = p[1] - g[1]
    return math.sqrt(float(dx * dx + dy * dy))


CASES = []


def case(name, preds, gts, pairs, radius=16.0):
    """pairs: list of (pred_idx, gt_idx) decided by hand."""
    tp = len(pairs)
    fp = len(preds) - tp
    fn = len(gts) - tp
    det_p = ratio(float(tp), float(tp + fp))
    det_r = ratio(float(tp), float(tp + fn))
    det_f1 = f1(det_p, det_r)

    mu = sigma = None
    if pairs:
        spairs = sorted(pairs, key=lambda pg: pg[1])  # gt-index order
        ds = [dist(preds[i][:2], gts[j][:2]) for i, j in spairs]
        total = 0.0
        for d in ds:
            total += d
        mu = total / float(len(ds))
        sq = 0.0
        for d in ds:
            sq += (d - mu) * (d - mu)
        sigma = math.sqrt(sq / float(len(ds)))

    classes = sorted({p[2] for p in preds} | {g[2] for g in gts})
    mp = mr = mf = 0.0
    n_gt_classes = 0
    for cls in classes:
        pred_count = sum(1 for p in preds if p[2] == cls)
        gt_count = sum(1 for g in gts if g[2] == cls)
        ctp = sum(1 for i, j in pairs if preds[i][2] == cls and gts[j][2] == cls)
        cp = ratio(float(ctp), float(pred_count))
        cr = ratio(float(ctp), float(gt_count))
        cf = f1(cp, cr)
        if gt_count > 0:
            mp += cp
            mr += cr
            mf += cf
            n_gt_classes += 1
    cls_p = mp / float(n_gt_classes) if n_gt_classes else 0.0
    cls_r = mr / float(n_gt_classes) if n_gt_classes else 0.0
    cls_f1 = mf / float(n_gt_classes) if n_gt_classes else 0.0

    CASES.append({
        "name": name,
        "radius": radius,
        "preds": [{"x": p[0], "y": p[1], "cls": p[2]} for p in preds],
        "gts": [{"x": g[0], "y": g[1], "cls": g[2]} for g in gts],
        "expect": {
            "tp": tp, "fp": fp, "fn": fn,
            "det_precision": det_p, "det_recall": det_r, "det_f1": det_f1,
            "dist_mean": mu, "dist_std": sigma,
            "cls_precision": cls_p, "cls_recall": cls_r, "cls_f1": cls_f1,
            "empty_gt": len(gts) == 0, "empty_pred": len(preds) == 0,
        },
    })


# 1: nothing at all
case("empty_both", [], [], [])

# 2: one exact match
case("single_identical", [(5, 5, 0)], [(5, 5, 0)], [(0, 0)])

# 3: one 3-4-5 match
case("single_345", [(13, 14, 2)], [(10, 10, 2)], [(0, 0)])

# 4: sqrt(325) = 18.03 > 16, no match possible
case("beyond_radius", [(10, 10, 0)], [(20, 25, 0)], [])

# 5: two predictions near one gt; the closer (d=3) wins, the other is FP
case("two_preds_one_gt", [(13, 10, 1), (15, 10, 1)], [(10, 10, 1)], [(0, 0)])

# 6: 8 coincident pairs + 2 stray preds + 2 stray gts -> P = R = 0.8
pairs8 = [(i * 100, 0, 0) for i in range(8)]
case("eight_two_two",
     pairs8 + [(0, 500, 0), (100, 500, 0)],
     pairs8 + [(0, 800, 0), (100, 800, 0)],
     [(i, i) for i in range(8)])

# 7: distances {0, 2, 4} -> mu = 2, sigma = sqrt(8/3)
case("dist_024",
     [(0, 0, 5), (102, 0, 5), (204, 0, 5)],
     [(0, 0, 5), (100, 0, 5), (200, 0, 5)],
     [(0, 0), (1, 1), (2, 2)])

# 8: 3 exact pairs, one class wrong
case("cls_mix",
     [(0, 0, 0), (100, 0, 1), (200, 0, 1)],
     [(0, 0, 0), (100, 0, 1), (200, 0, 0)],
     [(0, 0), (1, 1), (2, 2)])

# 9: predicted class absent from gt is excluded from the macro average
case("pred_class_absent", [(0, 0, 3)], [(0, 0, 2)], [(0, 0)])

# 10: predictions but empty gt
case("empty_gt_with_preds", [(0, 0, 0), (100, 0, 1)], [], [])

# 11: gts but empty predictions
case("empty_pred_with_gts", [], [(0, 0, 0), (100, 0, 1), (200, 0, 2)], [])

# 12: exactly on the 16 px gate -> still a match
case("radius_boundary", [(26, 10, 4)], [(10, 10, 4)], [(0, 0)])

# 13: sqrt(257) = 16.03, just outside the gate
case("radius_just_out", [(26, 11, 4)], [(10, 10, 4)], [])

# 14: distances 13 and 5 -> mu = 9, sigma = 4
case("five_12_13",
     [(5, 12, 6), (103, 104, 6)],
     [(0, 0, 6), (100, 100, 6)],
     [(0, 0), (1, 1)])

# 15: 2 pairs (one wrong-free), 1 FP, 1 FN across three classes
case("fp_fn_mixed_classes",
     [(0, 0, 0), (103, 4, 4), (200, 0, 4)],
     [(0, 0, 0), (100, 0, 4), (300, 0, 2)],
     [(0, 0), (1, 1)])

# 16: distances {1, 2, 3, 6} -> mu = 3, sigma = sqrt(3.5)
case("dist_1236",
     [(1, 0, 1), (102, 0, 1), (203, 0, 1), (306, 0, 1)],
     [(0, 0, 1), (100, 0, 1), (200, 0, 1), (300, 0, 1)],
     [(0, 0), (1, 1), (2, 2), (3, 3)])

# 17: both pairs swap classes -> detection perfect, classification zero
case("two_classes_swap",
     [(0, 0, 0), (100, 0, 1)],
     [(0, 0, 1), (100, 0, 0)],
     [(0, 0), (1, 1)])

# 18: 1 pair + 3 false positives -> P = 0.25, F1 = 0.4
case("many_fp",
     [(0, 0, 2), (200, 200, 2), (300, 300, 2), (400, 400, 2)],
     [(0, 0, 2)],
     [(0, 0)])

# 19: 1 pair + 4 false negatives -> R = 0.2
case("many_fn",
     [(0, 0, 3)],
     [(0, 0, 3), (200, 0, 3), (400, 0, 3), (600, 0, 3), (800, 0, 3)],
     [(0, 0)])

# 20: 5 pairs, distances {0, 5, 5, 12, 13}, 1 FP, 2 FN, 2 class errors
case("bigger_scene",
     [(0, 0, 0), (103, 4, 1), (203, 4, 2), (305, 12, 3), (412, 5, 5),
      (900, 900, 0)],
     [(0, 0, 0), (100, 0, 1), (200, 0, 2), (300, 0, 4), (400, 0, 6),
      (600, 600, 1), (700, 700, 4)],
     [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)])

assert len(CASES) == 20, len(CASES)
with open("metrics_golden.json", "w") as fh:
    json.dump({"cases": CASES}, fh, indent=1)
    fh.write("\n")
print(f"wrote {len(CASES)} cases")
