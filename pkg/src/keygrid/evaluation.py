"""Keypoint quality metrics (mIoU, DAS) and the perturbation-robustness protocol.

mIoU greedily matches predicted to annotated keypoints by increasing distance
and counts pairs within the threshold (inclusive) as true positives. DAS
checks that each keypoint index carries the same semantic assignment across a
pair of shapes, either via labeled ground-truth keypoints or via dense
index correspondences between deformation frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import PointCloud, add_gaussian_noise, downsample

DEFAULT_THRESHOLD = 0.1


class EvalError(ValueError):
    pass


@dataclass
class EvalRecord:
    """Predicted keypoints for one shape plus its reference annotation.

    Exactly one of `labels` (list of (label, position) ground-truth keypoints)
    or `cloud` + `corr` (cloud coordinates and an index correspondence map into
    a canonical index space shared by paired records) must be provided.
    """

    shape_id: str
    keypoints: np.ndarray  # K x 3
    labels: list[tuple[str, np.ndarray]] | None = None
    cloud: np.ndarray | None = None
    corr: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.labels is None and (self.cloud is None or self.corr is None):
            raise EvalError(f"record {self.shape_id!r} has neither labels nor correspondences")


def miou(predicted, annotated, threshold: float = DEFAULT_THRESHOLD,
         optimal: bool = False) -> float:
    """Intersection-over-union (percent) of predicted vs annotated keypoints.

    Greedy one-to-one matching by increasing distance by default; the
    `optimal` flag switches to minimum-cost bipartite assignment. Pairs at
    exactly the threshold count as matched.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    ann = np.asarray(annotated, dtype=np.float64)
    if ann.size == 0:
        raise EvalError("empty annotation set")
    if pred.size == 0:
        raise EvalError("empty prediction set")
    k, g = pred.shape[0], ann.shape[0]
    d = np.linalg.norm(pred[:, None] - ann[None, :], axis=2)
    tp = 0
    if optimal:
        rows, cols = linear_sum_assignment(d)
        tp = int(np.sum(d[rows, cols] <= threshold))
    else:
        order = np.argsort(d, axis=None, kind="stable")
        used_p, used_a = set(), set()
        for flat in order:
            i, j = divmod(int(flat), g)
            if d[i, j] > threshold:
                break
            if i in used_p or j in used_a:
                continue
            used_p.add(i)
            used_a.add(j)
            tp += 1
    return 100.0 * tp / (k + g - tp)


def _label_of(keypoint: np.ndarray, labels: list[tuple[str, np.ndarray]],
              radius: float) -> str | None:
    dists = [np.linalg.norm(keypoint - pos) for _, pos in labels]
    best = int(np.argmin(dists))
    return labels[best][0] if dists[best] <= radius else None


def _pair_consistency(a: EvalRecord, b: EvalRecord, radius: float) -> np.ndarray:
    k = a.keypoints.shape[0]
    if b.keypoints.shape[0] != k:
        raise EvalError(f"records {a.shape_id!r}/{b.shape_id!r} disagree on keypoint count")
    ok = np.zeros(k, dtype=bool)
    if a.labels is not None and b.labels is not None:
        for q in range(k):
            la = _label_of(a.keypoints[q], a.labels, radius)
            lb = _label_of(b.keypoints[q], b.labels, radius)
            ok[q] = la is not None and la == lb
        return ok
    if a.cloud is None or b.cloud is None:
        raise EvalError("paired records must both carry labels or both carry correspondences")

    def direction(src: EvalRecord, dst: EvalRecord) -> np.ndarray:
        # nearest cloud point of each source keypoint, mapped through the
        # correspondence, must land within `radius` of the partner keypoint
        d = np.linalg.norm(src.keypoints[:, None] - src.cloud[None, :], axis=2)
        nearest = np.argmin(d, axis=1)
        canon = src.corr[nearest]
        inv = {c: i for i, c in enumerate(dst.corr)}
        mapped = np.array([inv[c] for c in canon])
        gap = np.linalg.norm(dst.cloud[mapped] - dst.keypoints, axis=1)
        return gap <= radius

    return direction(a, b) & direction(b, a)


def das(pairs: list[tuple[EvalRecord, EvalRecord]],
        radius: float = DEFAULT_THRESHOLD) -> float:
    """Percentage of keypoint indices with consistent semantics across pairs."""
    if not pairs:
        raise EvalError("no record pairs")
    consistent = 0
    total = 0
    for a, b in pairs:
        ok = _pair_consistency(a, b, radius)
        consistent += int(ok.sum())
        total += ok.size
    return 100.0 * consistent / total


# --- robustness protocol --------------------------------------------------------

def _predict_keypoints(model, cloud: PointCloud) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        h = model.encode(cloud)
        pred = model.predict_keypoints(h)
    return pred.keypoints.numpy().astype(np.float64)


def _records_from(model, frames, keypoints_by_frame=None) -> list[EvalRecord]:
    records = []
    for i, (cloud, corr) in enumerate(frames):
        kp = (keypoints_by_frame[i] if keypoints_by_frame is not None
              else _predict_keypoints(model, cloud))
        records.append(EvalRecord(
            shape_id=cloud.id, keypoints=kp,
            cloud=cloud.numpy().astype(np.float64), corr=corr,
        ))
    return records


def _all_pairs(records):
    return [(records[i], records[j])
            for i in range(len(records)) for j in range(i + 1, len(records))]


def robustness_suite(model, frames, noise_scales, downsample_factors,
                     radius: float = DEFAULT_THRESHOLD, num_seeds: int = 5) -> dict:
    """DAS and keypoint displacement under Gaussian noise and FPS downsampling.

    `frames` is a list of (normalized PointCloud, correspondence map). For
    each perturbation, keypoints are re-predicted on the perturbed cloud while
    consistency is assessed against the clean clouds' correspondences.
    Noise rows aggregate the median over `num_seeds` seeds.
    """
    clean_records = _records_from(model, frames)
    clean_kp = [r.keypoints for r in clean_records]
    clean_das = das(_all_pairs(clean_records), radius)
    report = {"radius": radius, "clean_das": clean_das, "noise": [], "downsample": []}

    for scale in noise_scales:
        das_vals, disp_vals = [], []
        for seed in range(num_seeds):
            kps = []
            for i, (cloud, _) in enumerate(frames):
                noisy = add_gaussian_noise(cloud, scale, seed=seed * 7919 + i)
                kps.append(_predict_keypoints(model, noisy))
            recs = _records_from(model, frames, keypoints_by_frame=kps)
            das_vals.append(das(_all_pairs(recs), radius))
            disp_vals.append(float(np.mean([
                np.linalg.norm(kp - ref, axis=1).mean()
                for kp, ref in zip(kps, clean_kp)
            ])))
        report["noise"].append({
            "scale": scale,
            "das": float(np.median(das_vals)),
            "mean_displacement": float(np.median(disp_vals)),
        })

    for factor in downsample_factors:
        kps = []
        for cloud, _ in frames:
            reduced = cloud if factor == 1 else downsample(cloud, factor)
            kps.append(_predict_keypoints(model, reduced))
        recs = _records_from(model, frames, keypoints_by_frame=kps)
        disp = float(np.mean([
            np.linalg.norm(kp - ref, axis=1).mean()
            for kp, ref in zip(kps, clean_kp)
        ]))
        report["downsample"].append({
            "factor": factor,
            "das": das(_all_pairs(recs), radius),
            "mean_displacement": disp,
        })
    return report


def format_report(report: dict) -> str:
    """Aligned-column text table of a robustness report."""
    lines = [
        f"clean DAS: {report['clean_das']:.1f}",
        f"{'perturbation':<20} {'DAS':>8} {'displacement':>14}",
    ]
    for row in report["noise"]:
        lines.append(f"{'noise ' + format(row['scale'], 'g'):<20} "
                     f"{row['das']:>8.1f} {row['mean_displacement']:>14.5f}")
    for row in report["downsample"]:
        lines.append(f"{'downsample ' + str(row['factor']) + 'x':<20} "
                     f"{row['das']:>8.1f} {row['mean_displacement']:>14.5f}")
    return "\n".join(lines)
