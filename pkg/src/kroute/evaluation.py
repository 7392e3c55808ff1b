"""Session-level precision/recall and bundle-level coverage.

A predicted bundle is a hit when it equals or is a subset of some
ground-truth bundle. Corpus numbers are macro means over sessions;
coverage is averaged only over sessions that have at least one hit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

from .decode import normalize

AGGREGATION = "macro mean over sessions; coverage over sessions with >=1 hit"


def match_hits(predicted, truth) -> list[tuple[int, float] | None]:
    """For each predicted bundle: (ground-truth index, |b∩g|/|g|) or None.

    Among the ground-truth bundles containing b, the one with the highest
    ratio wins; ties go to the lowest index.
    """
    gt = [set(g) for g in truth]
    out = []
    for b in predicted:
        bs = set(b)
        best = None
        for j, g in enumerate(gt):
            if bs <= g:
                ratio = len(bs & g) / len(g)
                if best is None or ratio > best[1]:
                    best = (j, ratio)
        out.append(best)
    return out


@dataclass
class SessionResult:
    session_id: int
    predicted: list[list[int]]
    hits: list[tuple[int, float] | None]
    precision: float
    recall: float
    coverage: float | None

    def to_json(self) -> dict:
        return {"session_id": self.session_id, "predicted": self.predicted,
                "hits": [None if h is None else [h[0], h[1]] for h in self.hits],
                "precision": self.precision, "recall": self.recall, "coverage": self.coverage}


def session_metrics(predicted, truth, session_id: int = -1) -> SessionResult:
    if not truth:
        raise ValueError("session has no ground-truth bundles")
    pred = [list(b) for b in normalize(predicted)]
    hits = match_hits(pred, truth)
    n_hit = sum(h is not None for h in hits)
    precision = n_hit / len(pred) if pred else 0.0
    gt_sets = [set(g) for g in truth]
    found = {j for j, g in enumerate(gt_sets)
             if any(h is not None and set(b) <= g for b, h in zip(pred, hits))}
    recall = len(found) / len(truth)
    ratios = [h[1] for h in hits if h is not None]
    coverage = sum(ratios) / len(ratios) if ratios else None
    return SessionResult(session_id, pred, hits, precision, recall, coverage)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    coverage: float | None
    n_sessions: int
    n_coverage_sessions: int
    per_session: list[SessionResult] = field(default_factory=list)
    split_fingerprint: str = ""
    name: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "precision": self.precision, "recall": self.recall,
                "coverage": self.coverage, "n_sessions": self.n_sessions,
                "n_coverage_sessions": self.n_coverage_sessions,
                "aggregation": AGGREGATION, "split_fingerprint": self.split_fingerprint,
                "per_session": [r.to_json() for r in self.per_session]}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(d["precision"], d["recall"], d["coverage"], d["n_sessions"],
                   d.get("n_coverage_sessions", 0), [], d.get("split_fingerprint", ""),
                   d.get("name", ""))


def split_fingerprint(session_ids: Sequence[int]) -> str:
    return hashlib.sha256(json.dumps(sorted(int(i) for i in session_ids)).encode()).hexdigest()[:16]


def aggregate(results: Sequence[SessionResult], name: str = "") -> MetricsReport:
    if not results:
        raise ValueError("no sessions to aggregate")
    n = len(results)
    covs = [r.coverage for r in results if r.coverage is not None]
    return MetricsReport(
        precision=sum(r.precision for r in results) / n,
        recall=sum(r.recall for r in results) / n,
        coverage=sum(covs) / len(covs) if covs else None,
        n_sessions=n,
        n_coverage_sessions=len(covs),
        per_session=list(results),
        split_fingerprint=split_fingerprint([r.session_id for r in results]),
        name=name,
    )


def evaluate(predictions: dict[int, list[list[int]]], sessions, name: str = "") -> MetricsReport:
    """Score predictions keyed by session id; missing sessions count as empty."""
    return aggregate([session_metrics(predictions.get(s.session_id, []), s.bundles, s.session_id)
                      for s in sessions], name)


def compare_strategies(reports: Sequence[MetricsReport]) -> dict:
    """Rows sorted by name plus pairwise absolute and relative deltas."""
    if len(reports) < 2:
        raise ValueError("need at least two runs to compare")
    prints = {r.split_fingerprint for r in reports}
    if len(prints) != 1:
        raise ValueError(f"runs were scored on different splits: {sorted(prints)}")
    rows = sorted(reports, key=lambda r: r.name)
    metrics = ("precision", "recall", "coverage")
    table = {"aggregation": AGGREGATION,
             "rows": [{"name": r.name, **{m: getattr(r, m) for m in metrics}} for r in rows],
             "deltas": []}
    for i, a in enumerate(rows):
        for b in rows[i + 1:]:
            for x, y in ((a, b), (b, a)):
                entry = {"run": y.name, "over": x.name}
                for m in metrics:
                    va, vb = getattr(x, m), getattr(y, m)
                    if va is None or vb is None:
                        entry[m] = entry[f"{m}_rel"] = None
                        continue
                    entry[m] = vb - va
                    entry[f"{m}_rel"] = (vb - va) / va if va else None
                table["deltas"].append(entry)
    return table


def format_table(table: dict) -> str:
    width = max(len(r["name"]) for r in table["rows"]) + 2
    lines = [f"# {table['aggregation']}",
             f"{'run':<{width}}{'Precision':>11}{'Recall':>11}{'Coverage':>11}"]

    def fmt(v):
        return f"{v:>11.4f}" if v is not None else f"{'n/a':>11}"

    for r in table["rows"]:
        lines.append(f"{r['name']:<{width}}{fmt(r['precision'])}{fmt(r['recall'])}{fmt(r['coverage'])}")
    if table["deltas"]:
        lines.append("")
        lines.append("Improve (relative)")
        for d in table["deltas"]:
            cells = "".join(f"{d[m + '_rel'] * 100:>+10.2f}%" if d[m + "_rel"] is not None
                            else f"{'n/a':>11}" for m in ("precision", "recall", "coverage"))
            lines.append(f"{d['run'] + ' vs ' + d['over']:<{2 * width + 4}}{cells}")
    return "\n".join(lines)
