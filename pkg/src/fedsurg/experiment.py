"""Experiment orchestration: configuration, the three learning paradigms,
evaluation and comparison reports.

The declarative config names 3 development and (optionally) external
validation sites, the feature budget, architecture widths and training
hyperparameters. Every random stream derives from the experiment seed,
so a full pipeline rerun reproduces each artifact byte for byte.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from . import metrics
from .cohort import (Cohort, FeatureSpec, GenerationReport, GroundTruthModel,
                     OUTCOME_NAMES, SiteConfig, generate_site, make_ground_truth)
from .federation import (FederationResult, RoundRecord, SiteWorker, TrainConfig,
                         run_federation_inprocess)
from .model import (ArchConfig, Batch, ModelParams, init_params, local_train,
                    predict)
from .preprocess import Preprocessor, chronological_split, merge_scaler_stats


class ConfigError(ValueError):
    pass


@dataclass
class SiteEntry:
    config: SiteConfig
    role: str  # "development" | "external"

    def __post_init__(self):
        if self.role not in ("development", "external"):
            raise ConfigError(f"unknown site role {self.role!r}")


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    features: FeatureSpec
    sites: list[SiteEntry]
    train: TrainConfig
    embed_dim: int = 16
    branch_hidden: int = 32
    merge_hidden: int = 64
    signal_scale: float = 0.35
    algorithms: tuple[str, ...] = ("fedavg", "fedprox", "scaffold")
    n_boot: int = 1000
    fine_tune_epochs: int = 5
    fine_tune_embed_dim: int = 8
    host: str = "127.0.0.1"
    port: int = 9631

    def __post_init__(self):
        dev = {s.config.site_name for s in self.sites if s.role == "development"}
        ext = {s.config.site_name for s in self.sites if s.role == "external"}
        if dev & ext:
            raise ConfigError(f"sites in both roles: {sorted(dev & ext)}")
        if not dev:
            raise ConfigError("need at least one development site")
        names = [s.config.site_name for s in self.sites]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate site names")

    @property
    def development_sites(self) -> list[str]:
        return sorted(s.config.site_name for s in self.sites
                      if s.role == "development")

    @property
    def external_sites(self) -> list[str]:
        return sorted(s.config.site_name for s in self.sites
                      if s.role == "external")

    def site(self, name: str) -> SiteEntry:
        for s in self.sites:
            if s.config.site_name == name:
                return s
        raise ConfigError(f"unknown site {name!r}")

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(
            n_continuous=self.features.n_continuous,
            n_binary=self.features.n_binary,
            high_card_specs=tuple((v, self.embed_dim)
                                  for v in self.features.hc_vocab_sizes),
            branch_hidden=self.branch_hidden,
            merge_hidden=self.merge_hidden,
            n_outcomes=len(OUTCOME_NAMES),
        )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    try:
        feats = doc.get("features", {})
        features = FeatureSpec(
            n_continuous=feats.get("n_continuous", 60),
            n_binary=feats.get("n_binary", 30),
            hc_vocab_sizes=tuple(feats.get(
                "hc_vocab_sizes", FeatureSpec().hc_vocab_sizes)),
        )
        seed = int(doc["seed"])
        train_doc = dict(doc.get("train", {}))
        train_doc.setdefault("seed", seed)
        train = TrainConfig(**train_doc)
        sites = []
        for entry in doc["sites"]:
            entry = dict(entry)
            role = entry.pop("role", "development")
            entry["site_name"] = entry.pop("name")
            if "target_prevalence" in entry:
                entry["target_prevalence"] = tuple(entry["target_prevalence"])
            if "date_range" in entry:
                entry["date_range"] = tuple(entry["date_range"])
            sites.append(SiteEntry(SiteConfig(**entry), role))
        arch_doc = doc.get("arch", {})
        return ExperimentConfig(
            seed=seed,
            output_dir=doc.get("output_dir", "out"),
            features=features,
            sites=sites,
            train=train,
            embed_dim=arch_doc.get("embed_dim", 16),
            branch_hidden=arch_doc.get("branch_hidden", 32),
            merge_hidden=arch_doc.get("merge_hidden", 64),
            signal_scale=doc.get("signal_scale", 0.35),
            algorithms=tuple(doc.get("algorithms",
                                     ("fedavg", "fedprox", "scaffold"))),
            n_boot=doc.get("evaluate", {}).get("n_boot", 1000),
            fine_tune_epochs=doc.get("fine_tune", {}).get("epochs", 5),
            fine_tune_embed_dim=doc.get("fine_tune", {}).get("embed_dim", 8),
            host=doc.get("transport", {}).get("host", "127.0.0.1"),
            port=doc.get("transport", {}).get("port", 9631),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from exc


# --- data preparation -----------------------------------------------------

def ground_truth(cfg: ExperimentConfig) -> GroundTruthModel:
    return make_ground_truth(cfg.features, cfg.seed, cfg.signal_scale)


def generate_cohorts(cfg: ExperimentConfig
                     ) -> dict[str, tuple[Cohort, GenerationReport]]:
    truth = ground_truth(cfg)
    return {
        entry.config.site_name: generate_site(
            entry.config, cfg.features, truth, cfg.seed)
        for entry in cfg.sites
    }


@dataclass
class SiteData:
    name: str
    role: str
    train: Cohort
    val: Cohort
    test: Cohort
    pp_local: Preprocessor
    pp_fed: Preprocessor | None = None


def shared_scaler(stats: list[tuple[np.ndarray, np.ndarray]]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Envelope of per-site stats after the transport's float32 round-trip."""
    quantized = [(np.asarray(m, dtype=np.float32).astype(np.float64),
                  np.asarray(x, dtype=np.float32).astype(np.float64))
                 for m, x in stats]
    return merge_scaler_stats(quantized)


def prepare_sites(cfg: ExperimentConfig, cohorts: dict[str, Cohort]
                  ) -> dict[str, SiteData]:
    """Split each site chronologically and fit local + shared-scaler
    preprocessors. The shared scaler is built from development sites only
    and applied to every site, mirroring the federation protocol."""
    vocabs = cfg.features.hc_vocab_sizes
    sites: dict[str, SiteData] = {}
    for entry in cfg.sites:
        name = entry.config.site_name
        train, val, test = chronological_split(cohorts[name])
        pp_local = Preprocessor(vocabs, entry.config.surgeon_vocab_size).fit(train)
        sites[name] = SiteData(name, entry.role, train, val, test, pp_local)
    dev_stats = [sites[n].pp_local.scaler_stats() for n in cfg.development_sites]
    gmins, gmaxs = shared_scaler(dev_stats)
    for entry in cfg.sites:
        name = entry.config.site_name
        sites[name].pp_fed = Preprocessor(
            vocabs, entry.config.surgeon_vocab_size).fit(
                sites[name].train, scaler_override=(gmins, gmaxs))
    return sites


def concat_batches(batches: list[Batch]) -> Batch:
    return Batch(
        continuous=np.concatenate([b.continuous for b in batches]),
        binary=np.concatenate([b.binary for b in batches]),
        high_card=tuple(np.concatenate([b.high_card[j] for b in batches])
                        for j in range(len(batches[0].high_card))),
        labels=np.concatenate([b.labels for b in batches]),
        surgeon=(np.concatenate([b.surgeon for b in batches])
                 if batches[0].surgeon is not None else None),
        encounter_ids=[e for b in batches for e in b.encounter_ids],
    )


def central_preprocessor(cfg: ExperimentConfig, sites: dict[str, SiteData]
                         ) -> Preprocessor:
    pooled = Cohort("pooled", [r for n in cfg.development_sites
                               for r in sites[n].train.records])
    max_surgeon = max(cfg.site(n).config.surgeon_vocab_size
                      for n in cfg.development_sites)
    return Preprocessor(cfg.features.hc_vocab_sizes, max_surgeon).fit(pooled)


# --- single-model training (local and central paradigms) ------------------

def _names_rng(seed: int, names: tuple[str, ...]) -> np.random.Generator:
    return np.random.default_rng(
        [seed] + [zlib.crc32(n.encode()) for n in sorted(names)])


@dataclass
class SingleResult:
    best_params: ModelParams
    best_round: int
    best_score: float
    history: list[RoundRecord]


def train_single(arch: ArchConfig, train_fm: Batch, val_fm: Batch,
                 cfg: TrainConfig, names: tuple[str, ...]) -> SingleResult:
    """Epoch loop with validation-AUROC model selection and patience.

    The RNG stream is keyed by (seed, participating site names), so
    central training on a single site is bit-identical to local training
    on that site.
    """
    rng = _names_rng(cfg.seed, names)
    params = init_params(arch, cfg.seed)
    best = dict(params)
    best_score = -np.inf
    best_round = -1
    since_best = 0
    history: list[RoundRecord] = []
    label = "+".join(sorted(names))
    for t in range(cfg.rounds):
        rep = local_train(params, arch, train_fm, cfg, rng)
        params = rep.params
        val = _val_scores(params, arch, val_fm)
        mean_val = float(np.mean(val))
        history.append(RoundRecord(t, val, {label: rep.mean_loss}, mean_val))
        if mean_val > best_score:
            best_score = mean_val
            best = dict(params)
            best_round = t
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return SingleResult(best, best_round, best_score, history)


def _val_scores(params: ModelParams, arch: ArchConfig, val_fm: Batch
                ) -> tuple[float, ...]:
    probs = predict(params, arch, val_fm)
    out = []
    for k in range(val_fm.labels.shape[1]):
        try:
            out.append(metrics.auroc(probs[:, k], val_fm.labels[:, k]))
        except metrics.DegenerateLabelsError:
            out.append(0.5)
    return tuple(out)


def run_local_paradigm(cfg: ExperimentConfig, sites: dict[str, SiteData]
                       ) -> dict[str, SingleResult]:
    out = {}
    for name in cfg.development_sites:
        sd = sites[name]
        out[name] = train_single(
            cfg.arch, sd.pp_local.transform(sd.train),
            sd.pp_local.transform(sd.val), cfg.train, (name,))
    return out


def run_central_paradigm(cfg: ExperimentConfig, sites: dict[str, SiteData]
                         ) -> tuple[SingleResult, Preprocessor]:
    pp = central_preprocessor(cfg, sites)
    names = tuple(cfg.development_sites)
    train_fm = concat_batches([pp.transform(sites[n].train) for n in names])
    val_fm = concat_batches([pp.transform(sites[n].val) for n in names])
    return train_single(cfg.arch, train_fm, val_fm, cfg.train, names), pp


def federated_train_config(cfg: ExperimentConfig, algo: str) -> TrainConfig:
    # The proximal term only applies to FedProx; other algorithms run mu=0.
    return cfg.train if algo == "fedprox" else replace(cfg.train, mu=0.0)


def build_workers(cfg: ExperimentConfig, sites: dict[str, SiteData],
                  algo: str) -> dict[str, SiteWorker]:
    train = federated_train_config(cfg, algo)
    return {
        name: SiteWorker(name, sites[name].train, sites[name].val,
                         cfg.arch, algo, train,
                         cfg.site(name).config.surgeon_vocab_size)
        for name in cfg.development_sites
    }


def run_federated_paradigm(cfg: ExperimentConfig, sites: dict[str, SiteData],
                           algo: str, record_params: bool = False
                           ) -> FederationResult:
    workers = build_workers(cfg, sites, algo)
    return run_federation_inprocess(cfg.arch, algo,
                                    federated_train_config(cfg, algo),
                                    workers, record_params=record_params)


# --- evaluation -----------------------------------------------------------

@dataclass
class EvalCell:
    model: str
    site: str
    outcome: str
    n_total: int
    n_positives: int
    threshold: float | None
    auroc: metrics.BootstrapResult
    auprc: metrics.BootstrapResult
    sensitivity: float | None = None
    specificity: float | None = None
    ppv: float | None = None
    npv: float | None = None

    def to_dict(self) -> dict:
        doc = {
            "model": self.model, "site": self.site, "outcome": self.outcome,
            "n_total": self.n_total, "n_positives": self.n_positives,
            "threshold": self.threshold,
            "sensitivity": self.sensitivity, "specificity": self.specificity,
            "ppv": self.ppv, "npv": self.npv,
        }
        for metric_name in ("auroc", "auprc"):
            r = getattr(self, metric_name)
            doc[metric_name] = {"point": r.point, "ci_low": r.ci_low,
                                "ci_high": r.ci_high, "n_skipped": r.n_skipped}
        return doc


def evaluate_scores(model: str, site: str, probs: np.ndarray,
                    labels: np.ndarray, val_probs: np.ndarray | None,
                    val_labels: np.ndarray | None, n_boot: int,
                    seed: int) -> list[EvalCell]:
    """Per-outcome metrics with bootstrap CIs; threshold picked on the
    validation split (Youden) and applied to the test split."""
    cells = []
    for k, outcome in enumerate(OUTCOME_NAMES):
        y = labels[:, k]
        s = probs[:, k]
        n_pos = int(y.sum())
        cell_seed = zlib.crc32(f"{model}|{site}|{outcome}".encode()) ^ seed
        try:
            boot_auroc = metrics.bootstrap_ci(s, y, metrics.auroc, n_boot,
                                              seed=cell_seed)
            boot_auprc = metrics.bootstrap_ci(s, y, metrics.auprc, n_boot,
                                              seed=cell_seed + 1)
        except metrics.DegenerateLabelsError:
            nan = metrics.BootstrapResult(float("nan"), float("nan"), float("nan"))
            cells.append(EvalCell(model, site, outcome, len(y), n_pos, None,
                                  nan, nan))
            continue
        threshold = None
        thr = None
        if val_probs is not None:
            try:
                threshold = metrics.pick_threshold(val_probs[:, k], val_labels[:, k])
                thr = metrics.confusion_at_threshold(s, y, threshold)
            except metrics.DegenerateLabelsError:
                pass
        cells.append(EvalCell(
            model, site, outcome, len(y), n_pos, threshold,
            boot_auroc, boot_auprc,
            sensitivity=thr.sensitivity if thr else None,
            specificity=thr.specificity if thr else None,
            ppv=thr.ppv if thr else None,
            npv=thr.npv if thr else None,
        ))
    return cells


# --- artifact io ----------------------------------------------------------

def write_history_csv(path, history: list[RoundRecord]) -> None:
    clients = sorted(history[0].train_loss) if history else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round"] + [f"val_auroc_{o}" for o in OUTCOME_NAMES]
                        + [f"train_loss_{c}" for c in clients])
        for rec in history:
            writer.writerow([rec.round] + [repr(v) for v in rec.val_auroc]
                            + [repr(rec.train_loss[c]) for c in clients])


def write_scores_csv(path, encounter_ids: list[str], probs: np.ndarray,
                     labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["encounter_id"]
                        + [f"score_{o}" for o in OUTCOME_NAMES]
                        + [f"label_{o}" for o in OUTCOME_NAMES])
        for i, enc in enumerate(encounter_ids):
            writer.writerow([enc] + [repr(float(v)) for v in probs[i]]
                            + [int(v) for v in labels[i]])


def read_scores_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        ids, probs, labels = [], [], []
        for row in reader:
            ids.append(row[0])
            probs.append([float(v) for v in row[1:5]])
            labels.append([float(v) for v in row[5:9]])
    return ids, np.array(probs), np.array(labels)


def write_report(out_dir: Path, cells: list[EvalCell]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump([c.to_dict() for c in cells], fh, indent=1)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "site", "outcome", "n_total", "n_positives",
                         "auroc", "auroc_lo", "auroc_hi",
                         "auprc", "auprc_lo", "auprc_hi",
                         "threshold", "sensitivity", "specificity", "ppv", "npv"])
        for c in cells:
            writer.writerow([
                c.model, c.site, c.outcome, c.n_total, c.n_positives,
                c.auroc.point, c.auroc.ci_low, c.auroc.ci_high,
                c.auprc.point, c.auprc.ci_low, c.auprc.ci_high,
                c.threshold, c.sensitivity, c.specificity, c.ppv, c.npv])


def load_report(out_dir: Path) -> list[dict]:
    with open(Path(out_dir) / "report.json") as fh:
        return json.load(fh)
