"""Deterministic synthetic multi-site cohort generator.

Each site draws features under its own covariate shift, labels come from
a shared latent linear model (plus a small per-site coefficient
perturbation and a per-surgeon effect), and per-outcome intercepts are
calibrated by bisection against a Monte-Carlo sample so empirical
prevalences hit their configured targets. The raw stream also contains
under-18, ESRD and surgery-free encounters so the exclusion pipeline has
work to do.
"""

from __future__ import annotations

import csv
import datetime
import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

OUTCOME_NAMES = ("icu", "mv", "aki", "mortality")
_EPOCH = datetime.date(1970, 1, 1)


class CalibrationError(RuntimeError):
    """Target prevalence unreachable within the intercept search bracket."""


@dataclass(frozen=True)
class Surgery:
    procedure_code: int
    work_units: float
    surgery_date: int  # days since epoch


@dataclass
class EncounterRecord:
    patient_id: str
    encounter_id: str
    admission_date: int  # days since epoch
    age: float
    esrd: bool
    surgeries: tuple[Surgery, ...]
    surgeon_id: int
    continuous: np.ndarray          # nan marks a missing value
    binary: np.ndarray
    categorical: tuple             # int code or None for missing
    outcomes: np.ndarray           # icu, mv, aki, mortality as 0/1

    def __eq__(self, other):
        if not isinstance(other, EncounterRecord):
            return NotImplemented
        return (
            (self.patient_id, self.encounter_id, self.admission_date,
             self.esrd, self.surgeries, self.surgeon_id, self.categorical)
            == (other.patient_id, other.encounter_id, other.admission_date,
                other.esrd, other.surgeries, other.surgeon_id, other.categorical)
            and self.age == other.age
            and np.array_equal(self.continuous, other.continuous, equal_nan=True)
            and np.array_equal(self.binary, other.binary)
            and np.array_equal(self.outcomes, other.outcomes)
        )


@dataclass
class Cohort:
    site_name: str
    records: list[EncounterRecord]

    def __len__(self):
        return len(self.records)

    def prevalence(self) -> np.ndarray:
        if not self.records:
            return np.zeros(len(OUTCOME_NAMES))
        return np.stack([r.outcomes for r in self.records]).mean(axis=0)


@dataclass(frozen=True)
class FeatureSpec:
    """Feature budget shared by every site in an experiment."""

    n_continuous: int = 60
    n_binary: int = 30
    hc_vocab_sizes: tuple[int, ...] = (120, 40, 12, 8, 10, 16, 6, 9, 24)


@dataclass
class GroundTruthModel:
    """Latent label mechanism shared by the federation."""

    coef: np.ndarray          # n_outcomes x (n_continuous + n_binary)
    binary_probs: np.ndarray  # marginal probability of each binary feature


def make_ground_truth(spec: FeatureSpec, seed: int, signal_scale: float = 0.35
                      ) -> GroundTruthModel:
    rng = np.random.default_rng([seed, 0xC0EF])
    n_feat = spec.n_continuous + spec.n_binary
    coef = rng.normal(0.0, signal_scale, size=(len(OUTCOME_NAMES), n_feat))
    binary_probs = rng.uniform(0.05, 0.5, size=spec.n_binary)
    return GroundTruthModel(coef=coef, binary_probs=binary_probs)


@dataclass
class SiteConfig:
    site_name: str
    n_patients: int
    target_prevalence: tuple[float, float, float, float]
    encounters_mean: float = 1.3
    covariate_shift: float = 0.5    # std of per-feature mean offsets
    scale_shift: float = 0.15       # std of per-feature log-scale offsets
    concept_shift: float = 0.08     # std of per-site coefficient perturbation
    surgeon_vocab_size: int = 50
    surgeon_effect: float = 0.3
    missing_rate: float = 0.05
    date_range: tuple[int, int] = (15340, 19480)  # 2012-01 .. 2023-04
    esrd_rate: float = 0.01
    no_surgery_rate: float = 0.02

    def __post_init__(self):
        if not all(0.0 < p < 1.0 for p in self.target_prevalence):
            raise ValueError("target prevalences must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing rate must lie in [0, 1)")


@dataclass
class ExclusionReport:
    n_input: int
    n_under_18: int
    n_esrd: int
    n_no_surgery: int
    n_retained: int


@dataclass
class GenerationReport:
    site_name: str
    n_encounters: int
    prevalence: tuple[float, ...]
    intercepts: tuple[float, ...]
    exclusions: ExclusionReport


def _site_key(name: str) -> int:
    return zlib.crc32(name.encode())


@dataclass
class _SiteLatents:
    """Per-site distribution parameters, a pure function of the site name."""

    offsets: np.ndarray
    scales: np.ndarray
    coef: np.ndarray
    surgeon_effects: np.ndarray


def _site_latents(cfg: SiteConfig, spec: FeatureSpec,
                  truth: GroundTruthModel) -> _SiteLatents:
    srng = np.random.default_rng([_site_key(cfg.site_name), 0x517E])
    offsets = srng.normal(0.0, cfg.covariate_shift, spec.n_continuous)
    scales = np.exp(srng.normal(0.0, cfg.scale_shift, spec.n_continuous))
    coef = truth.coef + srng.normal(0.0, cfg.concept_shift, truth.coef.shape)
    surgeon_effects = srng.normal(0.0, cfg.surgeon_effect, cfg.surgeon_vocab_size)
    return _SiteLatents(offsets, scales, coef, surgeon_effects)


def _draw_features(n: int, cfg: SiteConfig, spec: FeatureSpec,
                   truth: GroundTruthModel, lat: _SiteLatents,
                   rng: np.random.Generator):
    cont = rng.normal(0.0, 1.0, (n, spec.n_continuous)) * lat.scales + lat.offsets
    binary = (rng.random((n, spec.n_binary)) < truth.binary_probs).astype(np.int8)
    surgeons = rng.integers(0, cfg.surgeon_vocab_size, size=n)
    return cont, binary, surgeons


def _scores(cont, binary, surgeons, lat: _SiteLatents) -> np.ndarray:
    x = np.concatenate([cont, binary.astype(np.float64)], axis=1)
    return x @ lat.coef.T + lat.surgeon_effects[surgeons][:, None]


def calibrate_intercept(target: float, scores: np.ndarray,
                        bracket: tuple[float, float] = (-20.0, 20.0)) -> float:
    """Bisect for the intercept b with mean(sigmoid(scores + b)) == target.

    ``scores`` is a Monte-Carlo sample from the site's score distribution;
    the mean is monotone in b, so bisection converges whenever the bracket
    straddles the target.
    """
    if not 0.0 < target < 1.0:
        raise CalibrationError(f"target {target} outside (0, 1)")
    lo, hi = bracket
    f_lo = expit(scores + lo).mean() - target
    f_hi = expit(scores + hi).mean() - target
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(
            f"target prevalence {target} not bracketed by intercepts {bracket}")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if expit(scores + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def select_index_surgery(record: EncounterRecord) -> EncounterRecord:
    """Keep only the surgery with maximal work units.

    Ties break to the earliest surgery date, then the lowest procedure
    code, so selection is deterministic.
    """
    if not record.surgeries:
        raise ValueError(f"encounter {record.encounter_id} has no surgeries")
    chosen = min(record.surgeries,
                 key=lambda s: (-s.work_units, s.surgery_date, s.procedure_code))
    return replace(record, surgeries=(chosen,))


def apply_exclusions(raw: list[EncounterRecord], site_name: str = ""
                     ) -> tuple[Cohort, ExclusionReport]:
    """Drop under-18, ESRD and surgery-free encounters, counting each."""
    kept = []
    n_age = n_esrd = n_surg = 0
    for rec in raw:
        if rec.age < 18.0:
            n_age += 1
        elif rec.esrd:
            n_esrd += 1
        elif not rec.surgeries:
            n_surg += 1
        else:
            kept.append(rec)
    report = ExclusionReport(len(raw), n_age, n_esrd, n_surg, len(kept))
    return Cohort(site_name, kept), report


def inject_missingness(cohort: Cohort, rate: float, seed: int) -> Cohort:
    """Blank each continuous/categorical value independently with ``rate``.

    Labels, demographics and the surgery record are never blanked.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("missing rate must lie in [0, 1)")
    if rate == 0.0:
        return cohort
    rng = np.random.default_rng([seed, _site_key(cohort.site_name), 0x3355])
    out = []
    for rec in cohort.records:
        cont = rec.continuous.copy()
        cont[rng.random(cont.shape) < rate] = np.nan
        cats = tuple(None if rng.random() < rate else c for c in rec.categorical)
        out.append(replace(rec, continuous=cont, categorical=cats))
    return Cohort(cohort.site_name, out)


def generate_site(cfg: SiteConfig, spec: FeatureSpec, truth: GroundTruthModel,
                  seed: int, mc_samples: int = 200_000
                  ) -> tuple[Cohort, GenerationReport]:
    """Generate one site's post-exclusion cohort, deterministic in the seed."""
    rng = np.random.default_rng([seed, _site_key(cfg.site_name)])
    lat = _site_latents(cfg, spec, truth)

    # raw encounter stream with excludable records mixed in
    raw: list[EncounterRecord] = []
    lo, hi = cfg.date_range
    for p in range(cfg.n_patients):
        pid = f"{cfg.site_name}-p{p:07d}"
        age_base = float(np.clip(rng.normal(57.0, 18.0), 0.0, 100.0))
        n_enc = 1 + int(rng.poisson(max(cfg.encounters_mean - 1.0, 0.0)))
        dates = np.sort(rng.integers(lo, hi, size=n_enc))
        for e, adm in enumerate(dates):
            if rng.random() < cfg.no_surgery_rate:
                surgeries: tuple[Surgery, ...] = ()
            else:
                n_surg = 1 + int(rng.poisson(0.5))
                surgeries = tuple(
                    Surgery(
                        procedure_code=int(rng.integers(0, spec.hc_vocab_sizes[0] - 1)),
                        work_units=float(np.round(rng.gamma(2.0, 10.0), 3)),
                        surgery_date=int(adm + rng.integers(0, 5)),
                    )
                    for _ in range(n_surg)
                )
            raw.append(EncounterRecord(
                patient_id=pid,
                encounter_id=f"{pid}-e{e}",
                admission_date=int(adm),
                age=float(np.round(age_base + 0.1 * e, 2)),
                esrd=bool(rng.random() < cfg.esrd_rate),
                surgeries=surgeries,
                surgeon_id=0,
                continuous=np.empty(0),
                binary=np.empty(0, dtype=np.int8),
                categorical=(),
                outcomes=np.zeros(4, dtype=np.int8),
            ))

    cohort, exclusions = apply_exclusions(raw, cfg.site_name)
    cohort.records = [select_index_surgery(r) for r in cohort.records]
    n = len(cohort.records)

    # features and labels for retained encounters
    cont, binary, surgeons = _draw_features(n, cfg, spec, truth, lat, rng)
    cont = np.round(cont, 6)
    scores = _scores(cont, binary, surgeons, lat)

    mc_rng = np.random.default_rng([seed, _site_key(cfg.site_name), 0xCA11])
    mc_cont, mc_bin, mc_surg = _draw_features(mc_samples, cfg, spec, truth, lat, mc_rng)
    mc_scores = _scores(mc_cont, mc_bin, mc_surg, lat)
    intercepts = np.array([
        calibrate_intercept(cfg.target_prevalence[k], mc_scores[:, k])
        for k in range(len(OUTCOME_NAMES))
    ])

    labels = (rng.random(scores.shape) < expit(scores + intercepts)).astype(np.int8)

    cat_matrix = np.column_stack(
        [rng.integers(0, v - 1, size=n) for v in spec.hc_vocab_sizes])
    for i, rec in enumerate(cohort.records):
        cats = [int(c) for c in cat_matrix[i]]
        cats[0] = rec.surgeries[0].procedure_code  # first code is the index surgery
        cohort.records[i] = replace(
            rec,
            surgeon_id=int(surgeons[i]),
            continuous=cont[i],
            binary=binary[i],
            categorical=tuple(cats),
            outcomes=labels[i],
        )

    cohort = inject_missingness(cohort, cfg.missing_rate, seed)
    report = GenerationReport(
        site_name=cfg.site_name,
        n_encounters=n,
        prevalence=tuple(float(v) for v in cohort.prevalence()),
        intercepts=tuple(float(b) for b in intercepts),
        exclusions=exclusions,
    )
    return cohort, report


# --- CSV round trip -------------------------------------------------------

def _iso(days: int) -> str:
    return (_EPOCH + datetime.timedelta(days=int(days))).isoformat()

def _days(iso: str) -> int:
    return (datetime.date.fromisoformat(iso) - _EPOCH).days


def cohort_to_csv(cohort: Cohort, path) -> None:
    """One row per encounter; empty cell = missing; labels as 0/1 columns."""
    if not cohort.records:
        spec_cont, spec_bin, spec_cat = 0, 0, 0
    else:
        first = cohort.records[0]
        spec_cont = len(first.continuous)
        spec_bin = len(first.binary)
        spec_cat = len(first.categorical)
    header = (["patient_id", "encounter_id", "admission_date", "age", "esrd",
               "surgeon_id", "procedure_code", "work_units", "surgery_date"]
              + [f"cont_{i:02d}" for i in range(spec_cont)]
              + [f"bin_{i:02d}" for i in range(spec_bin)]
              + [f"cat_{i}" for i in range(spec_cat)]
              + list(OUTCOME_NAMES))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in cohort.records:
            surgery = rec.surgeries[0]
            row = [rec.patient_id, rec.encounter_id, _iso(rec.admission_date),
                   repr(rec.age), int(rec.esrd), rec.surgeon_id,
                   surgery.procedure_code, repr(surgery.work_units),
                   _iso(surgery.surgery_date)]
            row += ["" if np.isnan(v) else repr(float(v)) for v in rec.continuous]
            row += [int(v) for v in rec.binary]
            row += ["" if c is None else int(c) for c in rec.categorical]
            row += [int(v) for v in rec.outcomes]
            writer.writerow(row)


def cohort_from_csv(path, site_name: str | None = None) -> Cohort:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_cont = sum(1 for h in header if h.startswith("cont_"))
        n_bin = sum(1 for h in header if h.startswith("bin_"))
        n_cat = sum(1 for h in header if h.startswith("cat_"))
        base = 9
        records = []
        for row in reader:
            cont = np.array([np.nan if v == "" else float(v)
                             for v in row[base:base + n_cont]])
            binary = np.array([int(v) for v in row[base + n_cont:base + n_cont + n_bin]],
                              dtype=np.int8)
            cat_cells = row[base + n_cont + n_bin:base + n_cont + n_bin + n_cat]
            cats = tuple(None if v == "" else int(v) for v in cat_cells)
            outs = np.array([int(v) for v in row[-4:]], dtype=np.int8)
            records.append(EncounterRecord(
                patient_id=row[0],
                encounter_id=row[1],
                admission_date=_days(row[2]),
                age=float(row[3]),
                esrd=bool(int(row[4])),
                surgeries=(Surgery(int(row[6]), float(row[7]), _days(row[8])),),
                surgeon_id=int(row[5]),
                continuous=cont,
                binary=binary,
                categorical=cats,
                outcomes=outs,
            ))
    name = site_name
    if name is None:
        name = records[0].patient_id.rsplit("-p", 1)[0] if records else ""
    return Cohort(name, records)
