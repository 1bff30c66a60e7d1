"""Gallery/probe retrieval: distance matrices, Rank-k and per-condition reports."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError, ParameterError

AGGREGATION = "probe-weighted micro-average over probe conditions"
TIE_BREAK = "lower gallery index wins on equal distance"


def pairwise_distances(gallery, probe, metric: str = "euclidean") -> np.ndarray:
    """``D[i, j]`` = distance from probe ``i`` to gallery ``j``."""
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    p = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    if g.shape[1] != p.shape[1]:
        raise ParameterError(f"gallery dim {g.shape[1]} != probe dim {p.shape[1]}")
    if metric == "euclidean":
        return cdist(p, g, "euclidean")
    if metric == "cosine":
        return cdist(p, g, "cosine")
    raise ParameterError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class RankResult:
    hits: int
    eligible: int
    skipped: int

    @property
    def accuracy(self) -> float:
        return self.hits / self.eligible if self.eligible else 0.0


def rank_k(dist, probe_labels, gallery_labels, k: int = 1, exclude=None) -> RankResult:
    """Count probes whose k nearest eligible gallery entries include their label.

    ``exclude`` is an optional boolean ``(P, G)`` mask of forbidden pairs.
    Probes with no eligible gallery entry are skipped and counted.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    d = np.asarray(dist, dtype=np.float64)
    pl = np.asarray(probe_labels)
    gl = np.asarray(gallery_labels)
    if d.shape != (pl.size, gl.size):
        raise ParameterError(f"distance matrix {d.shape} vs {pl.size} probes x {gl.size} gallery")
    mask = np.zeros(d.shape, dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool)
    hits = eligible = skipped = 0
    for i in range(d.shape[0]):
        cand = np.flatnonzero(~mask[i])
        if cand.size == 0:
            skipped += 1
            continue
        eligible += 1
        order = cand[np.argsort(d[i, cand], kind="stable")]
        if np.any(gl[order[:k]] == pl[i]):
            hits += 1
    return RankResult(hits, eligible, skipped)


def exclusion_mask(probes, gallery, rule: str = "same-sequence") -> np.ndarray:
    """Forbidden probe/gallery pairs for ``rule`` in none | same-sequence | same-view."""
    if rule not in ("none", "same-sequence", "same-view"):
        raise ParameterError(f"unknown exclusion rule {rule!r}")
    mask = np.zeros((len(probes), len(gallery)), dtype=bool)
    if rule == "none":
        return mask
    for i, p in enumerate(probes):
        for j, g in enumerate(gallery):
            if p.key == g.key or (rule == "same-view" and p.view == g.view):
                mask[i, j] = True
    return mask


@dataclass
class EvalReport:
    conditions: list
    overall: dict
    protocol: dict
    provenance: dict = field(default_factory=dict)
    matches: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "provenance": self.provenance,
            "protocol": self.protocol,
            "aggregation": AGGREGATION,
            "tie_break": TIE_BREAK,
            "conditions": self.conditions,
            "overall": self.overall,
            "matches": self.matches,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["condition", "probes", "eligible", "rank1", "rank5"])
        for c in self.conditions:
            w.writerow([c["condition"], c["probes"], c["eligible"], f"{c['rank1']:.4f}", f"{c['rank5']:.4f}"])
        o = self.overall
        w.writerow(["overall", o["probes"], o["eligible"], f"{o['rank1']:.4f}", f"{o['rank5']:.4f}"])
        return buf.getvalue()


def _pct(hits, eligible):
    return 100.0 * hits / eligible if eligible else 0.0


def per_condition_report(metas, embeddings, protocol, metric: str = "euclidean",
                         ks=(1, 5), provenance=None, log_matches: bool = False) -> EvalReport:
    """Rank-1/Rank-5 per probe condition plus the probe-weighted overall figure.

    ``metas`` are sequence metadata aligned with the rows of ``embeddings``.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] != len(metas):
        raise ParameterError(f"{emb.shape[0]} embeddings for {len(metas)} sequences")
    present = {m.condition for m in metas}
    for tag in (*protocol.gallery_conditions, *protocol.probe_conditions):
        if tag not in present:
            raise DataError(f"unknown condition tag {tag!r}: no sequences carry it")
    g_idx = [i for i, m in enumerate(metas) if m.condition in protocol.gallery_conditions]
    gallery = [metas[i] for i in g_idx]
    g_labels = np.array([m.subject for m in gallery])

    rows, matches = [], []
    totals = {k: 0 for k in ks}
    n_probes = n_eligible = 0
    for cond in protocol.probe_conditions:
        p_idx = [i for i, m in enumerate(metas) if m.condition == cond]
        probes = [metas[i] for i in p_idx]
        p_labels = np.array([m.subject for m in probes])
        dist = pairwise_distances(emb[g_idx], emb[p_idx], metric)
        excl = exclusion_mask(probes, gallery, protocol.exclusion)
        res = {k: rank_k(dist, p_labels, g_labels, k, excl) for k in ks}
        eligible = res[ks[0]].eligible
        row = {"condition": cond, "probes": len(probes), "eligible": eligible,
               "skipped": res[ks[0]].skipped}
        for k in ks:
            row[f"rank{k}"] = _pct(res[k].hits, eligible)
            totals[k] += res[k].hits
        rows.append(row)
        n_probes += len(probes)
        n_eligible += eligible
        if log_matches:
            for i, p in enumerate(probes):
                cand = np.flatnonzero(~excl[i])
                if cand.size:
                    j = cand[np.argsort(dist[i, cand], kind="stable")[0]]
                    matches.append({"probe": p.name, "match": gallery[j].name,
                                    "distance": float(dist[i, j]), "correct": bool(g_labels[j] == p.subject)})
    overall = {"probes": n_probes, "eligible": n_eligible}
    for k in ks:
        overall[f"rank{k}"] = _pct(totals[k], n_eligible)
    return EvalReport(rows, overall, protocol.to_json(), dict(provenance or {}, metric=metric), matches)


def check_layout(head, layout: dict) -> None:
    """Raise ``DataError`` naming the first branch/strip/channel divergence."""
    for b, want in head.layout().items():
        have = layout.get(b)
        if have is None:
            raise DataError(f"descriptors lack branch {b!r} required by the head")
        if have["strips"] != want["strips"]:
            raise DataError(f"branch {b!r}: head expects {want['strips']} strips, descriptors have {have['strips']}")
        if have["channels"] != want["channels"]:
            raise DataError(
                f"branch {b!r}: head expects {want['channels']} channels per strip, "
                f"descriptors have {have['channels']}")


def cross_domain_eval(head, descriptors, protocol, metric: str = "euclidean", provenance=None) -> EvalReport:
    """Apply a head trained on one dataset to another dataset's descriptors."""
    check_layout(head, descriptors.layout())
    emb = head.embed(descriptors.parts)
    return per_condition_report(descriptors.metas, emb, protocol, metric, provenance=provenance)


def format_table(report: dict) -> str:
    """Fixed-width text table: one column per probe condition, then OA@R1 and OA@R5."""
    conds = report["conditions"]
    header = [c["condition"] for c in conds] + ["OA@R1", "OA@R5"]
    r1 = [f"{c['rank1']:.1f}" for c in conds] + [f"{report['overall']['rank1']:.1f}",
                                                  f"{report['overall']['rank5']:.1f}"]
    r5 = [f"{c['rank5']:.1f}" for c in conds] + ["", ""]
    width = max(6, *(len(h) for h in header))
    lines = []
    prov = report.get("provenance", {})
    if prov.get("modality_set"):
        lines.append(f"modalities: {prov['modality_set']}")
    lines.append(f"{'':<8}" + "".join(f"{h:>{width + 1}}" for h in header))
    lines.append(f"{'Rank-1':<8}" + "".join(f"{v:>{width + 1}}" for v in r1))
    lines.append(f"{'Rank-5':<8}" + "".join(f"{v:>{width + 1}}" for v in r5))
    return "\n".join(line.rstrip() for line in lines) + "\n"
