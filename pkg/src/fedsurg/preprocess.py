"""Site-local preprocessing and the chronological split protocol.

The Preprocessor follows the fit/transform idiom: percentile clipping,
median imputation and min-max scaling are learned from the training
cohort only. In federated mode the min-max range is replaced by a shared
scaler built from exchanged per-site (min, max) summaries; clip bounds,
medians and category maps stay site-local.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort
from .model import Batch, FeatureMatrix

FORMAT_VERSION = 1


class SplitError(ValueError):
    pass


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.60, 0.10, 0.30)

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def chronological_split(cohort: Cohort, spec: SplitSpec = SplitSpec()
                        ) -> tuple[Cohort, Cohort, Cohort]:
    """Patient-grouped chronological split by first admission date.

    All of a patient's encounters land in one cohort; cut points are the
    patient boundaries whose cumulative encounter fractions are closest
    to the configured fractions.
    """
    if not cohort.records:
        raise SplitError("cannot split an empty cohort")
    by_patient: dict[str, list] = {}
    for rec in cohort.records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    if len(by_patient) < 3:
        raise SplitError("need at least 3 patients to split")
    ordered = sorted(
        by_patient.items(),
        key=lambda kv: (min(r.admission_date for r in kv[1]), kv[0]))
    counts = np.array([len(recs) for _, recs in ordered])
    cum = np.cumsum(counts)
    total = cum[-1]
    n_pat = len(ordered)

    f_train = spec.fractions[0]
    f_trainval = spec.fractions[0] + spec.fractions[1]
    t_candidates = np.arange(1, n_pat - 1)
    t_idx = int(t_candidates[np.argmin(np.abs(cum[t_candidates - 1] - f_train * total))])
    v_candidates = np.arange(t_idx + 1, n_pat)
    v_idx = int(v_candidates[np.argmin(np.abs(cum[v_candidates - 1] - f_trainval * total))])

    def collect(items):
        recs = []
        for _, rs in items:
            recs.extend(sorted(rs, key=lambda r: (r.admission_date, r.encounter_id)))
        return recs

    return (
        Cohort(cohort.site_name, collect(ordered[:t_idx])),
        Cohort(cohort.site_name, collect(ordered[t_idx:v_idx])),
        Cohort(cohort.site_name, collect(ordered[v_idx:])),
    )


@dataclass
class ContinuousStats:
    clip_low: float
    clip_high: float
    median: float
    scale_min: float
    scale_max: float


def _cont_matrix(cohort: Cohort) -> np.ndarray:
    return np.stack([r.continuous for r in cohort.records])


class Preprocessor:
    """Per-site feature preprocessor (fit on train, then transform).

    Categorical codes map to ``code + 1`` when observed at fit time
    (index 0 is reserved for missing/unseen), so index semantics agree
    across sites that share a code universe.
    """

    def __init__(self, hc_vocab_sizes: tuple[int, ...],
                 surgeon_vocab_size: int = 0,
                 hard_bounds: dict[int, tuple[float, float]] | None = None):
        self.hc_vocab_sizes = tuple(hc_vocab_sizes)
        self.surgeon_vocab_size = surgeon_vocab_size
        self.hard_bounds = dict(hard_bounds or {})
        self.cont_stats: list[ContinuousStats] | None = None
        self.cat_seen: list[set[int]] | None = None
        self.surgeon_seen: set[int] = set()

    @property
    def fitted(self) -> bool:
        return self.cont_stats is not None

    def fit(self, train: Cohort,
            scaler_override: tuple[np.ndarray, np.ndarray] | None = None
            ) -> "Preprocessor":
        if not train.records:
            raise FitError("cannot fit on an empty cohort")
        cont = _cont_matrix(train)
        stats: list[ContinuousStats] = []
        for i in range(cont.shape[1]):
            col = cont[:, i]
            col = col[~np.isnan(col)]
            if i in self.hard_bounds:
                lo, hi = self.hard_bounds[i]
                col = np.clip(col, lo, hi)
            if col.size == 0:
                raise FitError(f"continuous feature cont_{i:02d} entirely missing in train")
            clip_low, clip_high = np.percentile(col, [1.0, 99.0])
            clipped = np.clip(col, clip_low, clip_high)
            median = float(np.median(clipped))
            if scaler_override is not None:
                smin = float(scaler_override[0][i])
                smax = float(scaler_override[1][i])
            else:
                smin = float(clipped.min())
                smax = float(clipped.max())
            stats.append(ContinuousStats(float(clip_low), float(clip_high),
                                         median, smin, smax))
        self.cont_stats = stats
        self.cat_seen = [set() for _ in self.hc_vocab_sizes]
        for rec in train.records:
            for j, code in enumerate(rec.categorical):
                if code is not None:
                    self.cat_seen[j].add(int(code))
            self.surgeon_seen.add(int(rec.surgeon_id))
        return self

    def scaler_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-feature (min, max) of the clipped training data."""
        if not self.fitted:
            raise FitError("preprocessor not fitted")
        mins = np.array([s.scale_min for s in self.cont_stats])
        maxs = np.array([s.scale_max for s in self.cont_stats])
        return mins, maxs

    def transform(self, cohort: Cohort) -> FeatureMatrix:
        if not self.fitted:
            raise FitError("preprocessor not fitted")
        n = len(cohort.records)
        cont = _cont_matrix(cohort)
        out = np.empty_like(cont)
        for i, s in enumerate(self.cont_stats):
            col = cont[:, i].copy()
            if i in self.hard_bounds:
                lo, hi = self.hard_bounds[i]
                col = np.clip(col, lo, hi)
            col[np.isnan(col)] = s.median
            col = np.clip(col, s.clip_low, s.clip_high)
            span = s.scale_max - s.scale_min
            if span <= 0:
                out[:, i] = 0.0
            else:
                out[:, i] = np.clip((col - s.scale_min) / span, 0.0, 1.0)
        binary = np.stack([r.binary for r in cohort.records]).astype(np.float64)
        high_card = []
        for j, vocab in enumerate(self.hc_vocab_sizes):
            seen = self.cat_seen[j]
            idx = np.zeros(n, dtype=np.int64)
            for r, rec in enumerate(cohort.records):
                code = rec.categorical[j]
                if code is not None and code in seen and code + 1 < vocab:
                    idx[r] = code + 1
            high_card.append(idx)
        surgeon = np.zeros(n, dtype=np.int64)
        for r, rec in enumerate(cohort.records):
            sid = int(rec.surgeon_id)
            if sid in self.surgeon_seen and sid + 1 < self.surgeon_vocab_size + 1:
                surgeon[r] = sid + 1
        labels = np.stack([r.outcomes for r in cohort.records]).astype(np.float64)
        return Batch(
            continuous=out,
            binary=binary,
            high_card=tuple(high_card),
            labels=labels,
            surgeon=surgeon,
            encounter_ids=[r.encounter_id for r in cohort.records],
        )

    # --- audit artifact ---------------------------------------------------

    def to_json(self) -> str:
        if not self.fitted:
            raise FitError("preprocessor not fitted")
        doc = {
            "format_version": FORMAT_VERSION,
            "hc_vocab_sizes": list(self.hc_vocab_sizes),
            "surgeon_vocab_size": self.surgeon_vocab_size,
            "hard_bounds": {str(k): list(v) for k, v in self.hard_bounds.items()},
            "continuous": [vars(s) for s in self.cont_stats],
            "cat_seen": [sorted(s) for s in self.cat_seen],
            "surgeon_seen": sorted(self.surgeon_seen),
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Preprocessor":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise FitError(f"unsupported preprocessor format {doc.get('format_version')}")
        pp = cls(tuple(doc["hc_vocab_sizes"]), doc["surgeon_vocab_size"],
                 {int(k): tuple(v) for k, v in doc["hard_bounds"].items()})
        pp.cont_stats = [ContinuousStats(**d) for d in doc["continuous"]]
        pp.cat_seen = [set(s) for s in doc["cat_seen"]]
        pp.surgeon_seen = set(doc["surgeon_seen"])
        return pp


def merge_scaler_stats(per_site: list[tuple[np.ndarray, np.ndarray]]
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Envelope of per-site (min, max) vectors: min of mins, max of maxes."""
    if not per_site:
        raise ValueError("need stats from at least one site")
    n = len(per_site[0][0])
    for mins, maxs in per_site:
        if len(mins) != n or len(maxs) != n:
            raise ValueError("inconsistent feature counts across sites")
    mins = np.min(np.stack([m for m, _ in per_site]), axis=0)
    maxs = np.max(np.stack([m for _, m in per_site]), axis=0)
    return mins, maxs
