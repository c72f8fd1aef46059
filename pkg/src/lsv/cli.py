"""Command-line entry point: ``lsv gen|train|extract|eval|report``.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 missing
artifact.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import data, evaluation, ladder, nets, train
from .config import ConfigError, RunConfig

log = logging.getLogger("lsv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

CONFIG_ERRORS = (ConfigError, data.DataConfigError, data.CapacityError, nets.NetConfigError,
                 train.TrainConfigError, train.CheckpointMismatch, ladder.LadderConfigError,
                 evaluation.ScoringError)
MISSING_ERRORS = (FileNotFoundError, evaluation.LookupError_, train.CheckpointFormatError,
                  data.FeatureFormatError)


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _write_sidecar(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dumps(), encoding="utf-8")
    log.info("resolved config written to %s", path)


def _manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.manifest) if cfg.manifest else Path(cfg.corpus) / "manifest.tsv"


def _trials_path(cfg: RunConfig, value: str) -> Path:
    return Path(value) if value else Path(cfg.corpus) / "trials.tsv"


def _run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run_dir) if cfg.run_dir else Path("runs") / cfg.system


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _read_manifest(cfg: RunConfig) -> data.CorpusManifest:
    return data.CorpusManifest.read(_require(_manifest_path(cfg), "manifest"))


def _latest_checkpoint(run_dir: Path) -> Path:
    found = sorted(run_dir.glob("ckpt_e*.lsvc"))
    if not found:
        raise MissingArtifact(f"no checkpoint in {run_dir}")
    return found[-1]


def _load_net(cfg: RunConfig, run_dir: Path) -> nets.Network:
    path = Path(cfg.checkpoint) if cfg.checkpoint else _latest_checkpoint(run_dir)
    return train.network_from_checkpoint(train.load_checkpoint(_require(path, "checkpoint")))


def _backend(cfg: RunConfig, net: nets.Network) -> str:
    backend = cfg.backend or evaluation.default_backend(net)
    if backend not in ("cosine", "plda"):
        raise ConfigError(f"backend must be cosine or plda, got {backend!r}")
    return backend


def _plda_manifest(manifest: data.CorpusManifest) -> data.CorpusManifest:
    train_split = manifest.split("train")
    if len(train_split) == 0:
        raise ConfigError("the plda backend needs train-split utterances in the manifest to fit PLDA; "
                          "use --backend cosine or point --manifest at a corpus with a train split")
    return train_split


def _check_framework(cfg: RunConfig) -> None:
    if cfg.system not in train.SYSTEMS:
        raise ConfigError(f"unknown system {cfg.system!r}; choose from {', '.join(train.SYSTEMS)}")
    if cfg.framework and cfg.framework not in ("d-vector", "x-vector"):
        raise ConfigError(f"framework must be d-vector or x-vector, got {cfg.framework!r}")
    family = "d-vector" if cfg.system.startswith("d") else "x-vector"
    if cfg.framework and cfg.framework != family:
        raise ConfigError(f"system {cfg.system} is not available on the {cfg.framework} framework")


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.corpus)
    manifest = data.generate_corpus(out, cfg.speakers, cfg.utts, (cfg.frames_min, cfg.frames_max),
                                    cfg.feat_dim, cfg.separation, cfg.seed, cfg.test_speakers)
    test = manifest.split("test")
    if len(test):
        max_t, max_n = data.trial_capacity(test, cfg.enroll_utts)
        n_t = cfg.n_target or max_t
        n_n = cfg.n_nontarget or min(max_n, 4 * n_t)
        trials = data.make_trials(test, cfg.enroll_utts, n_t, n_n, cfg.seed)
        trials.write(out / "trials.tsv")
        log.info("wrote %d trials to %s", len(trials), out / "trials.tsv")
    _write_sidecar(cfg, out / "gen.config")
    print(out / "manifest.tsv")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _check_framework(cfg)
    tcfg = train.TrainConfig(system=cfg.system, epochs=cfg.epochs, base_lr=cfg.base_lr,
                             batch_size=cfg.batch_size, seed=cfg.seed, eval_every=cfg.eval_every,
                             chunk_min=cfg.chunk_min, chunk_max=cfg.chunk_max)
    manifest = _read_manifest(cfg)
    seqs = manifest.split("train").load_all()
    if not seqs:
        raise data.DataConfigError(f"manifest {_manifest_path(cfg)} has no train-split utterances")
    net = nets.build_system(cfg.system, n_speakers=len(train.speaker_index(seqs)),
                            feat_dim=seqs[0].frames.shape[1], seed=cfg.seed, width=cfg.width,
                            profile=cfg.profile, sigma=cfg.sigma, lambda0=cfg.lambda0,
                            lambda1=cfg.lambda1, lambda_rest=cfg.lambda_rest, lambda_norm=cfg.lambda_norm)
    run_dir = _run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_sidecar(cfg, run_dir / "train.config")

    evaluator = None
    if cfg.eval_trials:
        trials = data.TrialList.read(_require(Path(cfg.eval_trials), "trials"))
        backend = _backend(cfg, net)
        evaluator = evaluation.make_evaluator(
            manifest.split("test"), trials, backend,
            _plda_manifest(manifest) if backend == "plda" else None)

    resume = None
    if cfg.resume:
        path = _latest_checkpoint(run_dir) if cfg.resume == "latest" else _require(Path(cfg.resume), "checkpoint")
        resume = train.load_checkpoint(path, train.run_config(net, tcfg))
        log.info("resuming from %s (epoch %d)", path, resume.epoch)

    try:
        result = train.train(net, seqs, tcfg, run_dir, evaluator, resume)
    except train.NumericAbort as e:
        log.error("%s; last good checkpoint: %s", e, e.last_checkpoint)
        return EXIT_NUMERIC
    print(result.checkpoints[-1] if result.checkpoints else run_dir)
    return EXIT_OK


def cmd_extract(cfg: RunConfig) -> int:
    run_dir = _run_dir(cfg)
    net = _load_net(cfg, run_dir)
    manifest = _read_manifest(cfg)
    out = Path(cfg.out) if cfg.out else run_dir / "embeddings.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    emb = evaluation.embed_manifest(net, manifest)
    with open(out, "w", encoding="utf-8") as f:
        for e in manifest.entries:
            f.write(f"{e.speaker}\t{e.utterance}\t{' '.join(repr(float(v)) for v in emb[e.utterance])}\n")
    _write_sidecar(cfg, out.with_name(out.name + ".config"))
    print(out)
    return EXIT_OK


def _write_table(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _percent(eer: float) -> str:
    return f"{100.0 * eer:.4f}"


def cmd_eval(cfg: RunConfig) -> int:
    runs = [Path(r) for r in cfg.run] or [_run_dir(cfg)]
    if cfg.checkpoint and len(runs) > 1:
        raise ConfigError("--checkpoint applies to a single run; drop it or pass one --run")
    manifest = _read_manifest(cfg)
    trials = data.TrialList.read(_require(_trials_path(cfg, cfg.trials), "trials"))
    out = Path(cfg.out) if cfg.out else Path("eval_report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for run in runs:
        net = _load_net(cfg, _require(run, "run directory"))
        backend = _backend(cfg, net)
        plda = evaluation.train_plda_on(net, _plda_manifest(manifest)) if backend == "plda" else None
        scores, eer = evaluation.run_verification(net, manifest.split("test"), trials, backend, plda)
        scores.write(out.with_name(f"{out.stem}.{net.system}.scores"))
        rows.append((net.system, _percent(eer)))
        log.info("%s (%s): EER %s%%", net.system, backend, rows[-1][1])
    _write_table(out, ("system", "eer_percent"), rows)
    _write_sidecar(cfg, out.with_name(out.name + ".config"))
    print(out)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    if not cfg.run:
        raise MissingArtifact("no runs given; pass --run DIR (repeatable)")
    table, curve = [], []
    for run in map(Path, cfg.run):
        metrics = train.read_metrics(_require(run / "metrics.csv", "metrics file"))
        system = train.load_checkpoint(_latest_checkpoint(run)).config["train"]["system"]
        evals = [(r["epoch"], r["eer"]) for r in metrics if r["eer"] is not None]
        if not evals:
            raise MissingArtifact(f"{run / 'metrics.csv'} has no EER rows; train with --eval-trials")
        table.append((system, _percent(evals[-1][1])))
        curve.extend((epoch, _percent(eer), system) for epoch, eer in evals)
    out = Path(cfg.out) if cfg.out else Path("report")
    _write_table(out / "comparison.csv", ("system", "eer_percent"), table)
    _write_table(out / "eer_curve.csv", ("epoch", "eer_percent", "system"), curve)
    _write_sidecar(cfg, out / "report.config")
    print(out / "comparison.csv")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "extract": cmd_extract, "eval": cmd_eval, "report": cmd_report}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsv", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value config file; flags override its values")
    parser.add_argument("-v", "--verbose", action="store_true")
    for key, kind in RunConfig.keys().items():
        flag = "--" + key.replace("_", "-")
        if key == "run":
            parser.add_argument(flag, action="append", dest=key, metavar="DIR", help="run directory (repeatable)")
        elif key == "resume":
            parser.add_argument(flag, nargs="?", const="latest", dest=key, metavar="CKPT",
                                help="resume from CKPT, or from the newest checkpoint when bare")
        else:
            parser.add_argument(flag, dest=key, metavar=kind.__name__.upper())
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for key in RunConfig.keys():
        value = getattr(args, key)
        if value is not None:
            cfg.set(key, value)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        log.info("resolved config:\n%s", cfg.dumps().rstrip())
        return COMMANDS[args.command](cfg)
    except (MissingArtifact, *MISSING_ERRORS) as e:
        log.error("%s", e)
        return EXIT_MISSING
    except CONFIG_ERRORS as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except evaluation.PldaError as e:
        log.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
