"""Verification metrics: match scores, ROC, TAR@FAR, EER, AUC, pose bins.

Scores are cosine similarities between probe and gallery embeddings, fused
per gallery identity (max over that identity's gallery samples by default).
The ROC sweeps every distinct score as an accept-if-greater-or-equal
threshold; rates are reported in percent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synthetic import POSE_BINS


@dataclass
class ScoreSet:
    scores: np.ndarray  # cosine similarities
    genuine: np.ndarray  # bool
    bins: list[str]  # pose-bin tag per score (impostors inherit the probe's)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.genuine = np.asarray(self.genuine, dtype=bool)
        if len(self.scores) == 0:
            raise ValueError("empty score set")

    def subset(self, mask) -> "ScoreSet":
        idx = np.flatnonzero(mask)
        return ScoreSet(
            self.scores[idx],
            self.genuine[idx],
            [self.bins[i] for i in idx],
        )


@dataclass
class VerificationReport:
    tar_by_bin: dict  # bin name -> percent or None for empty bins
    average_tar: float
    auc: float
    eer: float
    fold: int = 0
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "fold": self.fold,
            "tar_by_bin": self.tar_by_bin,
            "average_tar": self.average_tar,
            "auc": self.auc,
            "eer": self.eer,
            **self.extras,
        }


def cosine_scores(
    gallery: np.ndarray,
    gallery_ids,
    probes: np.ndarray,
    probe_ids,
    probe_bins=None,
    fusion: str = "max",
) -> ScoreSet:
    """One score per (probe, gallery identity), fused over gallery samples."""
    gallery = np.asarray(gallery, dtype=np.float64)
    probes = np.asarray(probes, dtype=np.float64)
    gnorm = np.linalg.norm(gallery, axis=1)
    pnorm = np.linalg.norm(probes, axis=1)
    if np.any(gnorm == 0) or np.any(pnorm == 0):
        raise ValueError("zero-norm embedding")
    if fusion not in ("max", "mean"):
        raise ValueError(f"unknown fusion {fusion!r}")
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    if probe_bins is None:
        probe_bins = ["0-10"] * len(probe_ids)

    sims = (probes / pnorm[:, None]) @ (gallery / gnorm[:, None]).T
    scores, genuine, bins = [], [], []
    for gid in np.unique(gallery_ids):
        cols = gallery_ids == gid
        fused = sims[:, cols].max(axis=1) if fusion == "max" else sims[:, cols].mean(axis=1)
        scores.extend(fused.tolist())
        genuine.extend((probe_ids == gid).tolist())
        bins.extend(probe_bins)
    return ScoreSet(np.array(scores), np.array(genuine), bins)


def roc_curve(scores: ScoreSet) -> np.ndarray:
    """(FAR, TAR, threshold) rows, FAR ascending, endpoints included."""
    if not scores.genuine.any() or scores.genuine.all():
        raise ValueError("ROC needs both genuine and impostor scores")
    thresholds = np.concatenate(([np.inf], np.unique(scores.scores)[::-1], [-np.inf]))
    gen = scores.scores[scores.genuine]
    imp = scores.scores[~scores.genuine]
    rows = []
    for t in thresholds:
        far = float(np.mean(imp >= t))
        tar = float(np.mean(gen >= t))
        rows.append((far, tar, t))
    return np.array(rows)


def tar_at_far(curve: np.ndarray, far_target: float = 0.01) -> float:
    """TAR (percent) at the largest threshold with FAR <= target."""
    ok = curve[:, 0] <= far_target
    if not ok.any():
        return 0.0
    return float(curve[ok, 1].max() * 100.0)


def eer_and_auc(curve: np.ndarray) -> tuple[float, float]:
    """EER by linear interpolation of FAR = 1 - TAR; AUC by trapezoid rule."""
    fars, tars = curve[:, 0], curve[:, 1]
    order = np.lexsort((tars, fars))
    fars, tars = fars[order], tars[order]
    diff = fars - (1.0 - tars)
    eer = None
    for i in range(len(diff) - 1):
        if diff[i] <= 0 <= diff[i + 1] or diff[i] >= 0 >= diff[i + 1]:
            denom = (fars[i + 1] - fars[i]) + (tars[i + 1] - tars[i])
            lam = 0.0 if denom == 0 else (1.0 - tars[i] - fars[i]) / denom
            eer = fars[i] + lam * (fars[i + 1] - fars[i])
            break
    if eer is None:
        eer = float(np.abs(diff).argmin())
        eer = fars[int(eer)]
    auc = float(np.trapezoid(tars, fars))
    return float(eer * 100.0), auc * 100.0


def pose_binned_report(
    scores: ScoreSet, far_target: float = 0.01, fold: int = 0, average: str = "bin-mean"
) -> VerificationReport:
    """Per-bin TAR@FAR, their unweighted mean, and pooled AUC/EER."""
    tar_by_bin: dict = {}
    bins_arr = np.array(scores.bins)
    for b in POSE_BINS:
        mask = bins_arr == b
        if not mask.any():
            tar_by_bin[b] = None
            continue
        sub = scores.subset(mask)
        tar_by_bin[b] = tar_at_far(roc_curve(sub), far_target)
    present = [v for v in tar_by_bin.values() if v is not None]
    if average == "bin-mean":
        avg = float(np.mean(present)) if present else 0.0
    elif average == "probe-mean":
        avg = tar_at_far(roc_curve(scores), far_target)
    else:
        raise ValueError(f"unknown average mode {average!r}")
    eer, auc = eer_and_auc(roc_curve(scores))
    return VerificationReport(tar_by_bin, avg, auc, eer, fold)


# ---------------------------------------------------------------------------
# embedding-file and report IO


def write_embeddings(path: Path, ids, bins, embeddings: np.ndarray) -> None:
    """Rows of (id, pose-bin, E floats), comma-delimited."""
    embeddings = np.asarray(embeddings)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for i, b, e in zip(ids, bins, embeddings):
            w.writerow([int(i), b] + [repr(float(v)) for v in e])


def read_embeddings(path: Path) -> tuple[np.ndarray, list[str], np.ndarray]:
    ids, bins, rows = [], [], []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row:
                continue
            ids.append(int(row[0]))
            bins.append(row[1])
            rows.append([float(v) for v in row[2:]])
    return np.array(ids), bins, np.array(rows)


def write_report(path: Path, report: VerificationReport) -> None:
    with open(path, "w") as f:
        json.dump(report.as_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_curve(path: Path, curve: np.ndarray) -> None:
    """Per-threshold (FAR, TAR, threshold) table for external plotting."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["far", "tar", "threshold"])
        for far, tar, t in curve:
            w.writerow([repr(float(far)), repr(float(tar)), repr(float(t))])


def report_table(rows: dict[str, VerificationReport]) -> str:
    """Fixed-width comparison table: per-bin TAR, average, AUC, EER."""
    header = ["method"] + list(POSE_BINS) + ["avg-tar", "auc", "eer"]
    lines = ["\t".join(header)]
    for name, rep in rows.items():
        cells = [name]
        for b in POSE_BINS:
            v = rep.tar_by_bin.get(b)
            cells.append("-" if v is None else f"{v:.3f}")
        cells += [f"{rep.average_tar:.3f}", f"{rep.auc:.3f}", f"{rep.eer:.3f}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
