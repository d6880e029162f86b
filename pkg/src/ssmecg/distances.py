"""Distance structure of an embedding space: subjects, labels and heart rate."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.stats import ttest_rel


@dataclass
class EmbeddingSet:
    record_ids: list
    subject_ids: list
    embeddings: np.ndarray
    labels: list = field(default_factory=list)  # one dict per row
    hr_bpm: list = field(default_factory=list)  # float or None per row

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        n = len(self.record_ids)
        if self.embeddings.ndim != 2 or len(self.embeddings) != n or len(self.subject_ids) != n:
            raise ValueError("embedding rows, record ids and subject ids must align")
        self.labels = list(self.labels) or [{} for _ in range(n)]
        self.hr_bpm = list(self.hr_bpm) or [None] * n

    def save(self, directory) -> None:
        """``embeddings.f32le`` (row-major) plus ``embeddings.index.jsonl``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.embeddings.astype("<f4").tofile(directory / "embeddings.f32le")
        with open(directory / "embeddings.index.jsonl", "w") as fh:
            for i, rid in enumerate(self.record_ids):
                fh.write(json.dumps({
                    "row": i, "record_id": rid, "subject_id": self.subject_ids[i],
                    "labels": self.labels[i], "hr_bpm": self.hr_bpm[i],
                    "dim": int(self.embeddings.shape[1]),
                }, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "EmbeddingSet":
        directory = Path(directory)
        index = [json.loads(x) for x in open(directory / "embeddings.index.jsonl") if x.strip()]
        dim = index[0]["dim"] if index else 0
        emb = np.fromfile(directory / "embeddings.f32le", dtype="<f4").reshape(len(index), dim)
        return cls([e["record_id"] for e in index], [e["subject_id"] for e in index], emb,
                   [e.get("labels") or {} for e in index], [e.get("hr_bpm") for e in index])


def _mean_sd(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


def subject_distances(D: np.ndarray, subjects: np.ndarray):
    """Per-subject mean intra- and inter-subject distances."""
    intra, inter = [], []
    for s in np.unique(subjects):
        inside = subjects == s
        block = D[np.ix_(inside, inside)]
        k = inside.sum()
        intra.append(block.sum() / (k * (k - 1)))
        inter.append(D[np.ix_(inside, ~inside)].mean())
    return np.asarray(intra), np.asarray(inter)


def embedding_distance_report(embeddings, subject_ids, labels: dict | None = None,
                              hr_bpm=None, hr_bin_width: float = 10.0) -> dict:
    """Euclidean distance summary of an embedding set.

    Args:
        embeddings: (n, d) array.
        subject_ids: length-n subject identifiers; each subject needs >= 2 rows.
        labels: optional task name -> length-n label array.
        hr_bpm: optional length-n heart rates (None/NaN rows are ignored).

    Returns:
        dict with ``intra_subject`` / ``inter_subject`` mean and std over
        subjects, a two-sided paired t-test ``p_value`` (inter vs intra per
        subject), per-task ``within_label`` / ``across_label`` mean distances
        and an ``hr_curve`` of mean distance per |delta HR| bin.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    subjects = np.asarray(subject_ids)
    uniq, counts = np.unique(subjects, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError("need at least 2 subjects with at least 2 samples each")
    D = squareform(pdist(E))
    intra, inter = subject_distances(D, subjects)
    if np.allclose(inter - intra, (inter - intra)[0]):
        p_value = 1.0 if np.allclose(inter, intra) else 0.0
    else:
        p_value = float(ttest_rel(inter, intra).pvalue)
    report = {
        "n_samples": int(len(E)),
        "n_subjects": int(len(uniq)),
        "intra_subject": _mean_sd(intra),
        "inter_subject": _mean_sd(inter),
        "p_value": p_value,
    }

    iu = np.triu_indices(len(E), k=1)
    pair_d = D[iu]
    if labels:
        report["labels"] = {}
        for task, lab in labels.items():
            lab = np.asarray(lab)
            same = lab[iu[0]] == lab[iu[1]]
            report["labels"][task] = {
                "within_label": float(pair_d[same].mean()) if same.any() else None,
                "across_label": float(pair_d[~same].mean()) if (~same).any() else None,
            }
    if hr_bpm is not None:
        hr = np.asarray([np.nan if h is None else h for h in hr_bpm], dtype=np.float64)
        dhr = np.abs(hr[iu[0]] - hr[iu[1]])
        ok = np.isfinite(dhr)
        bins = np.floor(dhr[ok] / hr_bin_width).astype(int)
        curve = []
        for b in np.unique(bins):
            sel = bins == b
            curve.append({"delta_hr_lo": float(b * hr_bin_width),
                          "delta_hr_hi": float((b + 1) * hr_bin_width),
                          "mean_distance": float(pair_d[ok][sel].mean()),
                          "n_pairs": int(sel.sum())})
        report["hr_curve"] = curve
    return report
