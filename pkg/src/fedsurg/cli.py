"""Command-line interface.

Subcommands cover the full pipeline: cohort generation, training under
the local / central / federated paradigms, evaluation with bootstrap
confidence intervals, paradigm comparison, and the two socket-transport
roles (one coordinator and one process per participating site).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from . import experiment as exp
from .cohort import OUTCOME_NAMES, cohort_from_csv, cohort_to_csv
from .federation import Coordinator, FederationResult
from .model import load_checkpoint, save_checkpoint, predict
from .wire import connect_socket, serve_sockets

log = logging.getLogger("fedsurg")

MODEL_NAMES = ("central", "fedavg", "fedprox", "scaffold")


def _out(cfg: exp.ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    for sub in ("cohorts", "checkpoints", "history", "scores", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _load_cohorts(cfg: exp.ExperimentConfig, out: Path):
    cohorts = {}
    for entry in cfg.sites:
        path = out / "cohorts" / f"{entry.config.site_name}.csv"
        if not path.exists():
            raise SystemExit(
                f"missing cohort file {path}; run `fedsurg generate` first")
        cohorts[entry.config.site_name] = cohort_from_csv(path)
    return cohorts


def cmd_generate(cfg: exp.ExperimentConfig, args) -> int:
    out = _out(cfg)
    manifest = {"seed": cfg.seed, "sites": {}}
    for name, (cohort, report) in exp.generate_cohorts(cfg).items():
        cohort_to_csv(cohort, out / "cohorts" / f"{name}.csv")
        prev = cohort.prevalence()
        manifest["sites"][name] = {
            "role": cfg.site(name).role,
            "n_encounters": len(cohort.records),
            "prevalence": {o: prev[i] for i, o in enumerate(OUTCOME_NAMES)},
            "exclusions": asdict(report.exclusions),
            "intercepts": list(report.intercepts),
        }
        log.info("generated %s: %d encounters, prevalence %s",
                 name, len(cohort.records),
                 ", ".join(f"{o}={prev[i]:.3f}"
                           for i, o in enumerate(OUTCOME_NAMES)))
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    print(f"wrote {len(manifest['sites'])} cohorts to {out / 'cohorts'}")
    return 0


def _save_single(out: Path, name: str, arch, result) -> None:
    save_checkpoint(out / "checkpoints" / f"{name}.ckpt",
                    result.best_params, arch)
    exp.write_history_csv(out / "history" / f"{name}.csv", result.history)
    log.info("%s: best round %d, mean val AUROC %.4f",
             name, result.best_round, result.best_score)


def cmd_train(cfg: exp.ExperimentConfig, args) -> int:
    out = _out(cfg)
    sites = exp.prepare_sites(cfg, _load_cohorts(cfg, out))
    paradigms = (("local", "central", "federated") if args.paradigm == "all"
                 else (args.paradigm,))
    if "local" in paradigms:
        for name, result in exp.run_local_paradigm(cfg, sites).items():
            _save_single(out, f"local_{name}", cfg.arch, result)
    if "central" in paradigms:
        result, pp = exp.run_central_paradigm(cfg, sites)
        _save_single(out, "central", cfg.arch, result)
        (out / "checkpoints" / "central_preprocessor.json").write_text(
            pp.to_json())
    if "federated" in paradigms:
        algos = cfg.algorithms if args.algo == "all" else (args.algo,)
        for algo in algos:
            result = exp.run_federated_paradigm(cfg, sites, algo)
            _save_single(out, algo, cfg.arch, result)
    print(f"checkpoints written to {out / 'checkpoints'}")
    return 0


def _model_checkpoints(cfg: exp.ExperimentConfig, out: Path):
    found = {}
    names = [f"local_{n}" for n in cfg.development_sites] + list(MODEL_NAMES)
    for name in names:
        path = out / "checkpoints" / f"{name}.ckpt"
        if path.exists():
            params, _ = load_checkpoint(path, cfg.arch)
            found[name] = params
    if not found:
        raise SystemExit("no checkpoints found; run `fedsurg train` first")
    return found


def cmd_evaluate(cfg: exp.ExperimentConfig, args) -> int:
    out = _out(cfg)
    sites = exp.prepare_sites(cfg, _load_cohorts(cfg, out))
    checkpoints = _model_checkpoints(cfg, out)
    cells = []
    for model_name, params in sorted(checkpoints.items()):
        for site_name, sd in sorted(sites.items()):
            # Local models score foreign sites through that site's own
            # local scaler; shared-scaler models use the federated one.
            pp = sd.pp_local if model_name.startswith("local_") else sd.pp_fed
            test_fm = pp.transform(sd.test)
            val_fm = pp.transform(sd.val)
            probs = predict(params, cfg.arch, test_fm)
            val_probs = predict(params, cfg.arch, val_fm)
            exp.write_scores_csv(
                out / "scores" / f"{model_name}__{site_name}.csv",
                test_fm.encounter_ids, probs, test_fm.labels)
            cells.extend(exp.evaluate_scores(
                model_name, site_name, probs, test_fm.labels,
                val_probs, val_fm.labels, cfg.n_boot, cfg.seed))
            log.info("evaluated %s on %s", model_name, site_name)
    exp.write_report(out / "reports", cells)
    print(f"report written to {out / 'reports' / 'report.json'}")
    return 0


def _cell_index(cells: list[dict]) -> dict:
    return {(c["model"], c["site"], c["outcome"]): c for c in cells}


def cmd_compare(cfg: exp.ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    cells = _cell_index(exp.load_report(out / "reports"))
    models = sorted({m for m, _, _ in cells})
    verdicts = []

    def auroc(model, site, outcome):
        cell = cells.get((model, site, outcome))
        return cell["auroc"] if cell else None

    def overlap(a, b):
        return a["ci_low"] <= b["ci_high"] and b["ci_low"] <= a["ci_high"]

    local_models = [m for m in models if m.startswith("local_")]
    for site in cfg.development_sites + cfg.external_sites:
        for outcome in OUTCOME_NAMES:
            pairs = []
            if "scaffold" in models and "fedavg" in models:
                pairs.append(("scaffold", "fedavg"))
            if "scaffold" in models and "central" in models:
                pairs.append(("scaffold", "central"))
            foreign = [m for m in local_models if m != f"local_{site}"]
            for m in foreign:
                pairs.append(("scaffold", m))
            for a, b in pairs:
                ra, rb = auroc(a, site, outcome), auroc(b, site, outcome)
                if ra is None or rb is None:
                    continue
                verdicts.append({
                    "site": site, "outcome": outcome,
                    "model_a": a, "model_b": b,
                    "delta_auroc": ra["point"] - rb["point"],
                    "ci_overlap": overlap(ra, rb),
                })
    with open(out / "reports" / "compare.json", "w") as fh:
        json.dump(verdicts, fh, indent=1)
    for v in verdicts:
        mark = "~" if v["ci_overlap"] else ("+" if v["delta_auroc"] > 0 else "-")
        print(f"{mark} {v['site']:>12s} {v['outcome']:>9s} "
              f"{v['model_a']} vs {v['model_b']}: "
              f"dAUROC={v['delta_auroc']:+.4f}"
              f"{' (CIs overlap)' if v['ci_overlap'] else ''}")
    return 0


def cmd_serve_coordinator(cfg: exp.ExperimentConfig, args) -> int:
    out = _out(cfg)
    expected = cfg.development_sites
    log.info("coordinator listening on %s:%d for %d sites",
             cfg.host, cfg.port, len(expected))
    channels, _port = serve_sockets(cfg.host, cfg.port, len(expected))
    try:
        coordinator = Coordinator(cfg.arch, args.algo,
                                  exp.federated_train_config(cfg, args.algo),
                                  channels, expected)
        result: FederationResult = coordinator.run()
    finally:
        for chan in channels:
            chan.close()
    name = f"{args.algo}_socket"
    save_checkpoint(out / "checkpoints" / f"{name}.ckpt",
                    result.best_params, cfg.arch)
    exp.write_history_csv(out / "history" / f"{name}.csv", result.history)
    print(f"federated run complete: best round {result.best_round}, "
          f"mean val AUROC {result.best_score:.4f}")
    return 0


def cmd_serve_site(cfg: exp.ExperimentConfig, args) -> int:
    out = _out(cfg)
    cohorts = _load_cohorts(cfg, out)
    if args.site not in cfg.development_sites:
        raise SystemExit(f"{args.site!r} is not a development site")
    sites = exp.prepare_sites(cfg, cohorts)
    worker = exp.build_workers(cfg, sites, args.algo)[args.site]
    channel = connect_socket(cfg.host, cfg.port)
    try:
        worker.run(channel)
    finally:
        channel.close()
    log.info("site %s finished", args.site)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsurg",
        description="Federated surgical-complication risk modelling pipeline")
    parser.add_argument("--log-level", default="INFO",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment YAML")
        p.set_defaults(fn=fn)
        return p

    add("generate", cmd_generate, "synthesize per-site cohorts")
    p = add("train", cmd_train, "train models under one or all paradigms")
    p.add_argument("--paradigm", default="all",
                   choices=("local", "central", "federated", "all"))
    p.add_argument("--algo", default="all",
                   choices=("fedavg", "fedprox", "scaffold", "all"))
    add("evaluate", cmd_evaluate, "score checkpoints on every site's test split")
    add("compare", cmd_compare, "paradigm deltas from the evaluation report")
    p = add("serve-coordinator", cmd_serve_coordinator,
            "run the federation server over TCP")
    p.add_argument("--algo", default="fedavg",
                   choices=("fedavg", "fedprox", "scaffold"))
    p = add("serve-site", cmd_serve_site, "run one site worker over TCP")
    p.add_argument("--site", required=True)
    p.add_argument("--algo", default="fedavg",
                   choices=("fedavg", "fedprox", "scaffold"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = exp.load_config(args.config)
    except (OSError, exp.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return args.fn(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
