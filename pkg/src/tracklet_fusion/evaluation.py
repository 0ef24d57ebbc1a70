"""Retrieval metrics: distance matrices, CMC rank-k and mean average precision.

Protocol: for each query, gallery entries with the same identity *and* the
same camera are excluded, ranking ties break by stable gallery index, and
queries without any valid cross-camera match are skipped and counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray          # [M, d]
    identities: np.ndarray          # [M] int labels
    cameras: np.ndarray             # [M] int tags
    tracklet_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.identities = np.asarray(self.identities)
        self.cameras = np.asarray(self.cameras)
        m = self.embeddings.shape[0]
        if self.identities.shape[0] != m or self.cameras.shape[0] != m:
            raise ValueError("embeddings, identities and cameras disagree in length")
        if not self.tracklet_ids:
            self.tracklet_ids = [str(i) for i in range(m)]

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def distance_matrix(query: np.ndarray, gallery: np.ndarray,
                    metric: str = "euclidean") -> np.ndarray:
    """Pairwise distances [Nq, Ng] under euclidean or cosine distance."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ValueError(f"dimension mismatch: {query.shape} vs {gallery.shape}")
    if metric == "euclidean":
        sq_q = (query ** 2).sum(axis=1)[:, None]
        sq_g = (gallery ** 2).sum(axis=1)[None, :]
        d2 = np.maximum(sq_q + sq_g - 2.0 * query @ gallery.T, 0.0)
        return np.sqrt(d2)
    if metric == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True),
                                1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True),
                                  1e-12)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown metric '{metric}', expected euclidean or cosine")


def _ranked_matches(dist_row: np.ndarray, q_id, q_cam, g_ids: np.ndarray,
                    g_cams: np.ndarray) -> np.ndarray | None:
    """Boolean relevance of the ranked, camera-filtered gallery for one query.

    Returns None when no valid match exists after the camera exclusion.
    """
    order = np.argsort(dist_row, kind="stable")
    keep = ~((g_ids[order] == q_id) & (g_cams[order] == q_cam))
    ranked = order[keep]
    matches = g_ids[ranked] == q_id
    if not matches.any():
        return None
    return matches


def cmc(dist: np.ndarray, q_ids, g_ids, q_cams, g_cams,
        ranks=(1, 5, 10)) -> tuple[dict[int, float], int]:
    """Rank-k accuracies; returns (accuracies, skipped query count)."""
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    q_cams = np.asarray(q_cams)
    g_cams = np.asarray(g_cams)
    hits = {k: 0 for k in ranks}
    valid = 0
    skipped = 0
    for i in range(dist.shape[0]):
        matches = _ranked_matches(dist[i], q_ids[i], q_cams[i], g_ids, g_cams)
        if matches is None:
            skipped += 1
            continue
        valid += 1
        first = int(np.argmax(matches))
        for k in ranks:
            if first < k:
                hits[k] += 1
    if valid == 0:
        raise ValueError("no query has a valid cross-camera match")
    return {k: hits[k] / valid for k in ranks}, skipped


def mean_average_precision(dist: np.ndarray, q_ids, g_ids, q_cams,
                           g_cams) -> tuple[float, int]:
    """Mean over queries of average precision; returns (mAP, skipped count)."""
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    q_cams = np.asarray(q_cams)
    g_cams = np.asarray(g_cams)
    aps = []
    skipped = 0
    for i in range(dist.shape[0]):
        matches = _ranked_matches(dist[i], q_ids[i], q_cams[i], g_ids, g_cams)
        if matches is None:
            skipped += 1
            continue
        positions = np.flatnonzero(matches)
        precisions = np.cumsum(matches)[positions] / (positions + 1.0)
        aps.append(precisions.mean())
    if not aps:
        raise ValueError("no query has a valid cross-camera match")
    return float(np.mean(aps)), skipped


def evaluate(query: EmbeddingSet, gallery: EmbeddingSet, ranks=(1, 5, 10),
             metric: str = "euclidean") -> dict:
    """Full protocol over two embedding sets; returns a flat report dict."""
    if len(query) == 0 or len(gallery) == 0:
        raise ValueError("empty test set: no query/gallery embeddings")
    dist = distance_matrix(query.embeddings, gallery.embeddings, metric)
    accs, skipped = cmc(dist, query.identities, gallery.identities,
                        query.cameras, gallery.cameras, ranks)
    ap, _ = mean_average_precision(dist, query.identities, gallery.identities,
                                   query.cameras, gallery.cameras)
    report = {"map": ap, "excluded_queries": skipped,
              "num_queries": len(query), "num_gallery": len(gallery)}
    for k in ranks:
        report[f"rank{k}"] = accs[k]
    return report


def format_report(report: dict) -> str:
    """Text table followed by machine-readable key=value lines."""
    rank_keys = sorted((k for k in report if k.startswith("rank")),
                       key=lambda k: int(k[4:]))
    header = ["metric", "value"]
    rows = [("map", f"{report['map']:.4f}")]
    rows += [(k, f"{report[k]:.4f}") for k in rank_keys]
    rows += [("excluded_queries", str(report["excluded_queries"])),
             ("num_queries", str(report["num_queries"])),
             ("num_gallery", str(report["num_gallery"]))]
    width = max(len(r[0]) for r in rows + [tuple(header)])
    lines = [f"{header[0]:<{width}}  {header[1]}",
             f"{'-' * width}  {'-' * 10}"]
    lines += [f"{name:<{width}}  {value}" for name, value in rows]
    lines.append("")
    lines.append(f"map={report['map']:.6f}")
    for k in rank_keys:
        lines.append(f"{k}={report[k]:.6f}")
    lines.append(f"excluded_queries={report['excluded_queries']}")
    return "\n".join(lines)


def write_embeddings(path, embset: EmbeddingSet) -> None:
    """Line-delimited embedding dump consumed by the evaluator."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(len(embset)):
            fh.write(json.dumps({
                "tracklet_id": embset.tracklet_ids[i],
                "identity": int(embset.identities[i]),
                "camera": int(embset.cameras[i]),
                "embedding": embset.embeddings[i].tolist(),
            }) + "\n")


def read_embeddings(path) -> EmbeddingSet:
    ids, cams, tids, vecs = [], [], [], []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8")
                                 .splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            tids.append(rec["tracklet_id"])
            ids.append(int(rec["identity"]))
            cams.append(int(rec["camera"]))
            vecs.append(np.asarray(rec["embedding"], dtype=np.float64))
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad embedding record: {exc}")
    if not vecs:
        return EmbeddingSet(np.zeros((0, 0)), np.zeros(0, int),
                            np.zeros(0, int), [])
    return EmbeddingSet(np.stack(vecs), np.array(ids), np.array(cams), tids)
