"""Stage-oriented pipeline front end.

    trajmine <stage> --config cfg.toml --out DIR [--seed N] [--r 0.05,0.1]
                     [--lambda 0.5] [--scheme fixsegnum:5]

Stages: gen, ingest, features, train, score, mine, eval, ablate. Each stage
reads its prerequisites from the output directory and writes its artifacts
atomically. Artifacts carry the hash of the config that produced them:
examples.jsonl carries the data hash ({seed, data}); features, models,
scores, mined sets, and reports carry the pipeline hash ({seed, data,
features, flow, training, kalman}). tracks.csv and rare_flags.json keep
their plain ingestible schemas (they are fully determined by the data hash).
Mining lambda/r and eval options are deliberately outside the pipeline hash
so trained models are reused across sweeps; `eval` refuses inputs whose
hashes disagree.

Exit codes: 0 success, 2 config error, 3 prerequisite error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # py >= 3.11
except ImportError:  # pragma: no cover
    import tomli as tomllib

from . import evaluation, mining, synthgen
from .data_model import (
    examples_from_jsonl,
    examples_to_jsonl,
    ingest_csv,
    split_dataset,
    window_examples,
)
from .errors import (
    ConfigError,
    DataError,
    NumericError,
    PrerequisiteError,
    SchemaError,
    TrajmineError,
)
from .evaluation import KalmanConfig, predict_examples
from .flow import load_flow, save_flow
from .scene_features import (
    PartitionScheme,
    extract_features,
    fit_standardizer,
    load_feature_matrix,
    save_feature_matrix,
)
from .training import TrainConfig, train

logger = logging.getLogger("trajmine")

STAGES = ("gen", "ingest", "features", "train", "score", "mine", "eval", "ablate")

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "source": "synth",  # "synth" or "csv"
        "csv": None,
        "rare_flags": None,  # optional sidecar for csv sources
        "unit": "meters",
        "n_examples": 2000,
        "rare_rate": 0.05,
        "noise_std": 0.05,
        "lane_count": 4,
        "stride": 50,
        "eval_fraction": 0.0,
    },
    "features": {"scheme": "fixsegnum:5"},
    "mining": {"lambda": 0.5, "r": [0.05, 0.1, 0.15, 0.2]},
    "flow": {"n_couplings": 4, "hidden": 64},
    "training": {
        "epochs": 200,
        "batch_size": 128,
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 1e-5,
        "patience": 20,
        "val_fraction": 0.1,
    },
    "kalman": {
        "process_noise_accel_std": 1.0,
        "measurement_noise_std": 0.5,
        "initial_velocity_window": 2,
    },
    "eval": {"horizon_averaged": False, "external_errors": None, "histogram_bins": 50},
}

# seed offsets so the stages draw from distinct but reproducible streams
SEED_TRAIN_X = 1
SEED_TRAIN_Z = 2
SEED_RANDOM_BASELINE = 3
SEED_SPLIT = 4

ABLATE_LAMBDAS = [round(i / 10, 1) for i in range(11)]
ABLATE_SCHEMES = ["fixsegnum:1", "fixsegnum:3", "fixsegnum:5",
                  "fixseglen:0.6", "fixseglen:1.0", "fixseglen:1.4"]


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table/object")
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | os.PathLike | None) -> dict:
    """Defaults, overridden by a TOML or JSON file when given."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".json":
            loaded = json.loads(path.read_text())
        else:
            with open(path, "rb") as f:
                loaded = tomllib.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return _deep_merge(DEFAULT_CONFIG, loaded)


def validate_config(cfg: dict) -> None:
    data = cfg["data"]
    if data["source"] not in ("synth", "csv"):
        raise ConfigError(f"data.source must be 'synth' or 'csv', got {data['source']!r}")
    if data["source"] == "csv" and not data["csv"]:
        raise ConfigError("data.source='csv' requires data.csv to be set")
    if not 0.0 <= data["eval_fraction"] < 1.0:
        raise ConfigError("data.eval_fraction must be in [0, 1)")
    try:
        PartitionScheme.parse(cfg["features"]["scheme"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ratios = cfg["mining"]["r"]
    if not ratios or not all(0.0 < r <= 1.0 for r in ratios):
        raise ConfigError("mining.r must be a non-empty list of ratios in (0, 1]")
    if cfg["training"]["learning_rate"] <= 0:
        raise ConfigError("training.learning_rate must be positive")
    kal = cfg["kalman"]
    if kal["process_noise_accel_std"] <= 0 or kal["measurement_noise_std"] <= 0:
        raise ConfigError("kalman noise parameters must be positive")


def _hash_of(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def data_hash(cfg: dict) -> str:
    return _hash_of({"seed": cfg["seed"], "data": cfg["data"]})


def pipeline_hash(cfg: dict) -> str:
    return _hash_of({k: cfg[k] for k in ("seed", "data", "features", "flow", "training", "kalman")})


# ---------------------------------------------------------------------------
# artifact plumbing
# ---------------------------------------------------------------------------

_STAGE_OF_ARTIFACT = {
    "tracks.csv": "gen",
    "rare_flags.json": "gen",
    "examples.jsonl": "ingest",
    "features_x.bin": "features",
    "features_z.bin": "features",
    "model_x.flow": "train",
    "model_z.flow": "train",
    "scores.csv": "score",
}


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _locate(name: str, out: Path, fallback: Path | None) -> Path:
    for base in (out, fallback):
        if base is not None and (base / name).exists():
            return base / name
    stage = _STAGE_OF_ARTIFACT.get(name)
    hint = f"; run `trajmine {stage}` first" if stage else ""
    raise PrerequisiteError(f"missing artifact {name!r} in {out}{hint}")


def _check_hash(kind: str, found: str, expected: str, what: str) -> None:
    if found != expected:
        raise ConfigError(
            f"{what} was produced under a different {kind} config "
            f"(hash {found or '<none>'} != {expected}); re-run the earlier stages"
        )


def _load_examples(out: Path, fallback: Path | None, cfg: dict):
    path = _locate("examples.jsonl", out, fallback)
    examples, meta = examples_from_jsonl(path.read_text())
    _check_hash("data", meta.get("data_hash", ""), data_hash(cfg), str(path))
    return examples


def _tracks_csv_path(cfg: dict, out: Path, fallback: Path | None) -> Path:
    if cfg["data"]["source"] == "csv":
        path = Path(cfg["data"]["csv"])
        if not path.exists():
            raise ConfigError(f"data.csv not found: {path}")
        return path
    return _locate("tracks.csv", out, fallback)


def _rare_flags_path(cfg: dict, out: Path, fallback: Path | None) -> Path | None:
    if cfg["data"]["source"] == "csv":
        sidecar = cfg["data"]["rare_flags"]
        return Path(sidecar) if sidecar else None
    return _locate("rare_flags.json", out, fallback)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    if cfg["data"]["source"] != "synth":
        raise ConfigError("stage `gen` requires data.source='synth'")
    data = cfg["data"]
    dataset = synthgen.gen_dataset(
        data["n_examples"], data["rare_rate"], cfg["seed"],
        noise_std=data["noise_std"], lane_count=data["lane_count"],
    )
    _atomic_write(out / "tracks.csv", synthgen.tracks_to_csv(dataset.tracks))
    _atomic_write(out / "rare_flags.json", synthgen.flags_to_json(dataset.rare_flags))
    logger.info("gen: %d tracks, %d targets (%d rare)", len(dataset.tracks),
                len(dataset.rare_flags), sum(dataset.rare_flags.values()))


def stage_ingest(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    csv_path = _tracks_csv_path(cfg, out, fallback)
    tracks = ingest_csv(csv_path, unit=cfg["data"]["unit"] if cfg["data"]["source"] == "csv" else "meters")
    examples = window_examples(tracks, stride=cfg["data"]["stride"])
    flags_path = _rare_flags_path(cfg, out, fallback)
    if flags_path is not None:
        targets = set(synthgen.flags_from_json(flags_path.read_text()))
        examples = [ex for ex in examples if ex.target_id in targets]
    for ex in examples:
        ex.validate()
    if not examples:
        raise DataError(f"{csv_path}: no admissible examples (tracks too short?)")
    meta = {"data_hash": data_hash(cfg), "n_examples": len(examples), "source": str(csv_path)}
    _atomic_write(out / "examples.jsonl", examples_to_jsonl(examples, meta=meta))
    logger.info("ingest: %d examples from %d tracks", len(examples), len(tracks))


def stage_features(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    examples = _load_examples(out, fallback, cfg)
    tracks = ingest_csv(_tracks_csv_path(cfg, out, fallback),
                        unit=cfg["data"]["unit"] if cfg["data"]["source"] == "csv" else "meters")
    scheme = PartitionScheme.parse(cfg["features"]["scheme"])
    phash = pipeline_hash(cfg)
    for scope, name in (("X", "features_x.bin"), ("Z", "features_z.bin")):
        matrix = extract_features(examples, tracks, scope, scheme, config_hash=phash)
        tmp = out / (name + ".tmp")
        save_feature_matrix(matrix, tmp)
        os.replace(tmp, out / name)
        logger.info("features: %s %s -> %s", scope, matrix.values.shape, name)


def _train_rows(cfg: dict, n: int, out: Path) -> np.ndarray:
    frac = cfg["data"]["eval_fraction"]
    if frac <= 0.0:
        return np.arange(n)
    split = split_dataset(n, frac, cfg["seed"] + SEED_SPLIT)
    _atomic_write(out / "split.json", json.dumps(
        {"train": split.train_indices.tolist(), "eval": split.eval_indices.tolist()},
        sort_keys=True))
    return split.train_indices


def stage_train(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    phash = pipeline_hash(cfg)
    tcfg = cfg["training"]
    for scope, name, seed_offset in (("x", "features_x.bin", SEED_TRAIN_X),
                                     ("z", "features_z.bin", SEED_TRAIN_Z)):
        matrix = load_feature_matrix(_locate(name, out, fallback))
        _check_hash("pipeline", matrix.config_hash, phash, name)
        rows = _train_rows(cfg, matrix.values.shape[0], out)
        standardizer = fit_standardizer(matrix.values[rows], matrix.mask[rows])
        standardized = standardizer.apply(matrix.values, matrix.mask)
        config = TrainConfig(
            epochs=tcfg["epochs"], batch_size=tcfg["batch_size"],
            learning_rate=tcfg["learning_rate"], beta1=tcfg["beta1"],
            beta2=tcfg["beta2"], eps=tcfg["eps"], weight_decay=tcfg["weight_decay"],
            patience=tcfg["patience"], val_fraction=tcfg["val_fraction"],
            seed=cfg["seed"] + seed_offset,
            n_couplings=cfg["flow"]["n_couplings"], hidden=cfg["flow"]["hidden"],
        )
        model, log = train(standardized[rows], config)
        model.standardizer = standardizer
        model.config_hash = phash
        tmp = out / f"model_{scope}.flow.tmp"
        save_flow(model, tmp)
        os.replace(tmp, out / f"model_{scope}.flow")
        log.write_csv(out / f"trainlog_{scope}.csv", config_hash=phash)
        logger.info("train %s: dim %d, best epoch %d, val NLL %.3f, grad check %.1e",
                    scope, model.dim, log.best_epoch, log.val_nll[log.best_epoch],
                    log.grad_check.max_rel_error)


def stage_score(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    phash = pipeline_hash(cfg)
    matrix_x = load_feature_matrix(_locate("features_x.bin", out, fallback))
    matrix_z = load_feature_matrix(_locate("features_z.bin", out, fallback))
    model_x = load_flow(_locate("model_x.flow", out, fallback))
    model_z = load_flow(_locate("model_z.flow", out, fallback))
    for name, found in (("features_x.bin", matrix_x.config_hash),
                        ("features_z.bin", matrix_z.config_hash),
                        ("model_x.flow", model_x.config_hash),
                        ("model_z.flow", model_z.config_hash)):
        _check_hash("pipeline", found, phash, name)
    table = mining.score_examples(model_x, model_z, matrix_x, matrix_z,
                                  lam=cfg["mining"]["lambda"])
    _atomic_write(out / "scores.csv", mining.scores_to_csv(table, config_hash=phash))
    logger.info("score: %d examples, lambda=%s", len(table), cfg["mining"]["lambda"])


def stage_mine(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    phash = pipeline_hash(cfg)
    table, found = mining.scores_from_csv(_locate("scores.csv", out, fallback).read_text())
    _check_hash("pipeline", found, phash, "scores.csv")
    for ratio in cfg["mining"]["r"]:
        subsets = mining.mine_all(table, ratio)
        tag = f"{ratio:g}"
        _atomic_write(out / f"mined_r{tag}.csv", mining.mined_to_csv(table, subsets, config_hash=phash))
        summary = {"config_hash": phash, **mining.subsets_summary(subsets)}
        _atomic_write(out / f"mined_r{tag}.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
        logger.info("mine: r=%s -> %d per subset", tag, subsets.hard_idx.shape[0])


def stage_eval(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    phash = pipeline_hash(cfg)
    table, found = mining.scores_from_csv(_locate("scores.csv", out, fallback).read_text())
    _check_hash("pipeline", found, phash, "scores.csv")
    examples = _load_examples(out, fallback, cfg)
    if len(examples) != len(table):
        raise ConfigError("examples and score table disagree on the dataset size")

    kalman = KalmanConfig(**cfg["kalman"])
    preds, truth = predict_examples(examples, kalman)
    if cfg["eval"]["horizon_averaged"]:
        errors = np.sqrt(np.mean(np.sum((preds - truth) ** 2, axis=2), axis=1))
    else:
        errors = evaluation.terminal_errors(preds, truth)
    _atomic_write(out / "errors.csv", evaluation.errors_to_csv(errors, config_hash=phash))

    external = None
    if cfg["eval"]["external_errors"]:
        ext_path = Path(cfg["eval"]["external_errors"])
        if not ext_path.exists():
            raise ConfigError(f"eval.external_errors not found: {ext_path}")
        external = evaluation.errors_from_csv(ext_path.read_text())
        if external.shape[0] != len(table):
            raise ConfigError("external error file is not index-aligned with the dataset")

    report = None
    for ratio in cfg["mining"]["r"]:
        tag = f"{ratio:g}"
        subsets, found = mining.mined_from_csv(_locate(f"mined_r{tag}.csv", out, fallback).read_text())
        _check_hash("pipeline", found, phash, f"mined_r{tag}.csv")
        report = evaluation.build_report(
            table, subsets, errors, ratio,
            random_seed=cfg["seed"] + SEED_RANDOM_BASELINE,
            histogram_bins=cfg["eval"]["histogram_bins"],
            external_errors=external,
        )
        payload = evaluation.report_to_dict(report, config_hash=phash)
        _atomic_write(out / f"report_r{tag}.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
        logger.info("eval: r=%s err_full=%.3f hard delta_err=%+.1f%%", tag,
                    report.err_full, 100 * report.subsets["hard"].delta_err)
    _atomic_write(out / "histograms.csv", evaluation.histograms_to_csv(report, config_hash=phash))


def stage_ablate(cfg: dict, out: Path, fallback: Path | None = None) -> None:
    """Sweep lambda (reusing trained models) and the partition-scheme grid."""
    summary_rows = ["sweep,cell,r,subset,err,delta_err,cov_ref"]

    def collect(sweep: str, cell: str, cell_out: Path):
        for ratio in cfg["mining"]["r"]:
            payload = json.loads((cell_out / f"report_r{ratio:g}.json").read_text())
            for name, metrics in sorted(payload["subsets"].items()):
                summary_rows.append(
                    f"{sweep},{cell},{ratio:g},{name},{metrics['err']!r},"
                    f"{metrics['delta_err']!r},{metrics['cov_ref']!r}"
                )

    for lam in ABLATE_LAMBDAS:
        cell_cfg = copy.deepcopy(cfg)
        cell_cfg["mining"]["lambda"] = lam
        cell_out = out / "ablate" / f"lambda_{lam:g}"
        cell_out.mkdir(parents=True, exist_ok=True)
        stage_score(cell_cfg, cell_out, fallback=out)
        stage_mine(cell_cfg, cell_out, fallback=out)
        stage_eval(cell_cfg, cell_out, fallback=out)
        collect("lambda", f"{lam:g}", cell_out)

    for scheme in ABLATE_SCHEMES:
        cell_cfg = copy.deepcopy(cfg)
        cell_cfg["features"]["scheme"] = scheme
        cell_out = out / "ablate" / f"scheme_{PartitionScheme.parse(scheme).tag}"
        cell_out.mkdir(parents=True, exist_ok=True)
        stage_features(cell_cfg, cell_out, fallback=out)
        stage_train(cell_cfg, cell_out, fallback=out)
        stage_score(cell_cfg, cell_out, fallback=out)
        stage_mine(cell_cfg, cell_out, fallback=out)
        stage_eval(cell_cfg, cell_out, fallback=out)
        collect("scheme", PartitionScheme.parse(scheme).tag, cell_out)

    _atomic_write(out / "ablate" / "summary.csv", "\n".join(summary_rows) + "\n")
    logger.info("ablate: %d lambda cells, %d scheme cells",
                len(ABLATE_LAMBDAS), len(ABLATE_SCHEMES))


_STAGE_FN = {
    "gen": stage_gen,
    "ingest": stage_ingest,
    "features": stage_features,
    "train": stage_train,
    "score": stage_score,
    "mine": stage_mine,
    "eval": stage_eval,
    "ablate": stage_ablate,
}


def run_stage(stage: str, cfg: dict, out: str | os.PathLike, fallback=None) -> int:
    """Run one pipeline stage; returns 0 on success, raises typed errors otherwise."""
    if stage not in _STAGE_FN:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    validate_config(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _STAGE_FN[stage](cfg, out, Path(fallback) if fallback else None)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.r is not None:
        try:
            cfg["mining"]["r"] = [float(v) for v in args.r.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--r expects comma-separated ratios, got {args.r!r}") from None
    if args.lambda_ is not None:
        cfg["mining"]["lambda"] = args.lambda_
    if args.scheme is not None:
        cfg["features"]["scheme"] = args.scheme
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajmine",
        description="Mine rare and hard-to-predict examples from vehicle trajectory data.",
    )
    parser.add_argument("stage", choices=STAGES, help="pipeline stage to run")
    parser.add_argument("--config", help="TOML or JSON config file (defaults otherwise)")
    parser.add_argument("--out", default="trajmine_out", help="artifact directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--r", default=None, help="override mining ratios, e.g. 0.05,0.1,0.2")
    parser.add_argument("--lambda", dest="lambda_", type=float, default=None,
                        help="override the hardness scaling parameter")
    parser.add_argument("--scheme", default=None, help="override partition scheme, e.g. fixsegnum:5")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return run_stage(args.stage, cfg, args.out)
    except (ConfigError, SchemaError, DataError, ValueError) as exc:
        logger.error("%s", exc)
        return 2
    except PrerequisiteError as exc:
        logger.error("%s", exc)
        return 3
    except NumericError as exc:
        logger.error("%s", exc)
        return 4
    except TrajmineError as exc:  # pragma: no cover - catch-all for new subtypes
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
