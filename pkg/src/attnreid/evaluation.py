"""Retrieval metrics: pairwise distances, CMC and mAP, occlusion deltas.

Protocol: per query, gallery entries with the same identity AND the same
camera are excluded; ties in distance are broken by gallery index. AP is
precision at each relevant hit averaged over the number of relevant
items; queries without any valid match are dropped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .model import ModelBundle, backbone_forward, embed
from .synthdata import load_sample, occlude
from .tensor import Tensor


@dataclass
class EvalReport:
    distmat: np.ndarray
    cmc: np.ndarray                  # rank-1..rank-R accuracies
    mean_ap: float
    per_query_ap: np.ndarray
    excluded_queries: int = 0
    camera_exclusion: bool = True

    def rank(self, r: int) -> float:
        return float(self.cmc[r - 1])

    def summary(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "rank1": self.rank(1),
            "rank5": self.rank(min(5, len(self.cmc))),
            "excluded_queries": self.excluded_queries,
        }


def extract_embeddings(bundle: ModelBundle, samples, batch_size: int = 64):
    """Embeddings in manifest order plus identity and camera label arrays."""
    dtype = bundle.config.np_dtype
    chunks = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        images = Tensor(np.stack([s.image for s in batch]).astype(dtype))
        _, features = backbone_forward(images, bundle)
        chunks.append(embed(features, bundle).data.copy())
    ids = np.array([s.identity for s in samples])
    cams = np.array([s.camera for s in samples])
    return np.concatenate(chunks, axis=0), ids, cams


def pairwise_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix (Q, G)."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise DimensionError(
            f"pairwise_distances: incompatible shapes {query.shape} vs {gallery.shape}"
        )
    sq = (
        np.sum(query ** 2, axis=1)[:, None]
        + np.sum(gallery ** 2, axis=1)[None, :]
        - 2.0 * (query @ gallery.T)
    )
    return np.sqrt(np.maximum(sq, 0.0))


def cmc_map(distmat, q_ids, g_ids, q_cams, g_cams, max_rank: int | None = None) -> EvalReport:
    """CMC curve and mAP under the cross-camera exclusion protocol."""
    distmat = np.asarray(distmat)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    nq, ng = distmat.shape
    if q_ids.shape != (nq,) or g_ids.shape != (ng,):
        raise DimensionError("label arrays do not match the distance matrix")
    if max_rank is None:
        max_rank = ng
    cmc_accum = np.zeros(max_rank)
    aps = []
    excluded = 0
    for q in range(nq):
        order = np.argsort(distmat[q], kind="stable")  # index order breaks ties
        keep = ~((g_ids[order] == q_ids[q]) & (g_cams[order] == q_cams[q]))
        ranked = order[keep]
        matches = g_ids[ranked] == q_ids[q]
        num_rel = int(matches.sum())
        if num_rel == 0:
            excluded += 1
            continue
        hits = np.flatnonzero(matches)
        first = hits[0]
        if first < max_rank:
            cmc_accum[first:] += 1.0
        precision_at_hits = (np.arange(num_rel) + 1.0) / (hits + 1.0)
        aps.append(precision_at_hits.mean())
    valid = nq - excluded
    if valid == 0:
        raise DimensionError("no query has a valid cross-camera match")
    return EvalReport(
        distmat=distmat,
        cmc=cmc_accum / valid,
        mean_ap=float(np.mean(aps)),
        per_query_ap=np.array(aps),
        excluded_queries=excluded,
    )


def evaluate(bundle: ModelBundle, query_samples, gallery_samples) -> EvalReport:
    q_emb, q_ids, q_cams = extract_embeddings(bundle, query_samples)
    g_emb, g_ids, g_cams = extract_embeddings(bundle, gallery_samples)
    dist = pairwise_distances(q_emb, g_emb)
    return cmc_map(dist, q_ids, g_ids, q_cams, g_cams)


def occlusion_eval(bundle: ModelBundle, query_samples, gallery_samples,
                   fraction: float, side: str, fill: str = "noise", seed: int = 0):
    """Clean vs occluded-query reports plus degradation deltas."""
    clean = evaluate(bundle, query_samples, gallery_samples)
    occluded_queries = [
        occlude(s, fraction, side, fill=fill, seed=seed + i)
        for i, s in enumerate(query_samples)
    ]
    occluded = evaluate(bundle, occluded_queries, gallery_samples)
    deltas = {
        "rank1_drop": clean.rank(1) - occluded.rank(1),
        "map_drop": clean.mean_ap - occluded.mean_ap,
    }
    return clean, occluded, deltas


def load_split(root, manifest_entries):
    return [load_sample(root, e) for e in manifest_entries]


def write_report_csv(report: EvalReport, path, cmc_path=None, distmat_path=None) -> None:
    """``metric,value`` CSV; optionally the full CMC curve and raw distances."""
    path = Path(path)
    with open(path, "w") as f:
        f.write("metric,value\n")
        f.write(f"mAP,{report.mean_ap:.6f}\n")
        for r in (1, 5, 10):
            if r <= len(report.cmc):
                f.write(f"rank{r},{report.rank(r):.6f}\n")
        f.write(f"excluded_queries,{report.excluded_queries}\n")
    if cmc_path is not None:
        with open(cmc_path, "w") as f:
            f.write("rank,accuracy\n")
            for r, acc in enumerate(report.cmc, start=1):
                f.write(f"{r},{acc:.6f}\n")
    if distmat_path is not None:
        with open(distmat_path, "wb") as f:
            q, g = report.distmat.shape
            f.write(np.array([q, g], dtype="<i4").tobytes())
            f.write(report.distmat.astype("<f4").tobytes())
