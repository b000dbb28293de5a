"""Command-line pipeline driver.

Subcommands: synth, preprocess, pretrain, importance, finetune, eval.
Every command reads a JSON experiment config (``--config``), writes its
artifacts under the config's workdir, prints a one-line JSON summary to
stdout and logs to stderr. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical failure.

One global seed governs every stochastic stage; per-stage seeds are
derived by hashing (seed, stage name, dataset name), so each stage is
independently reproducible and adaptation in ``importance`` and
``finetune`` lands on identical embeddings.

Workdir layout::

    <workdir>/data/<name>.txt(.truth.json)   synth outputs
    <workdir>/prepared/<name>/               train/valid/test.txt + meta.json
    <workdir>/checkpoints/*.lrkt             model checkpoints
    <workdir>/profiles/<name>.json           importance profiles
    <workdir>/reports/*.json|.csv            metric reports
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .autograd import NumericalError
from .data import (
    DataFormatError,
    DatasetSpec,
    PreparedDataset,
    Splits,
    SyntheticConfig,
    build_vocab,
    generate_synthetic,
    ingest,
    observed_id_sizes,
    preprocess,
    write_blocks,
    write_truth_sidecar,
)
from .importance import ImportanceProfile, compute_importance
from .metrics import evaluate, reports_to_json, write_reports_csv, write_reports_json
from .model import PRESETS, KTModel, ModelConfig, zero_shot_adapt
from .train import (
    Checkpoint,
    TrainConfig,
    TrainingDivergedError,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    stage_seed,
)

logger = logging.getLogger("kttrace")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, config schema violations, or missing input files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# experiment config


_TRAIN_KEYS = {"learning_rate", "dropout", "max_epochs", "patience", "batch_size",
               "clip_norm"}
_MODEL_KEYS = {"preset", "n_layers", "d_model", "n_head", "d_ff", "dropout",
               "max_seq_len"}
_DATASET_KEYS = {"name", "dataset_index", "path", "role"}
_SYNTH_KEYS = {"n_students", "n_questions", "n_kcs", "ability_spread",
               "difficulty_spread", "learning_rate_per_exposure", "mean_seq_len",
               "seed"}


def _reject_unknown(obj, allowed, where):
    unknown = set(obj) - allowed
    if unknown:
        raise UsageError(f"unknown key(s) {sorted(unknown)} in {where}")


def _require(obj, key, where, types):
    if key not in obj:
        raise UsageError(f"missing required key {key!r} in {where}")
    if not isinstance(obj[key], types):
        raise UsageError(f"{where}.{key} must be {types}, got {type(obj[key]).__name__}")
    return obj[key]


class ExperimentConfig:
    def __init__(self, obj, base_dir):
        if not isinstance(obj, dict):
            raise UsageError("config root must be a JSON object")
        _reject_unknown(obj, {"seed", "paths", "model", "train", "datasets",
                              "synthetic"}, "config")
        self.seed = _require(obj, "seed", "config", int)
        paths = _require(obj, "paths", "config", dict)
        _reject_unknown(paths, {"workdir"}, "config.paths")
        workdir = _require(paths, "workdir", "config.paths", str)
        self.workdir = (base_dir / workdir).resolve() if not Path(workdir).is_absolute() \
            else Path(workdir)
        self.base_dir = base_dir

        self.model_section = obj.get("model", {})
        if not isinstance(self.model_section, dict):
            raise UsageError("config.model must be an object")
        _reject_unknown(self.model_section, _MODEL_KEYS, "config.model")
        if "preset" in self.model_section and \
                self.model_section["preset"] not in PRESETS:
            raise UsageError(f"config.model.preset must be one of {sorted(PRESETS)}")

        train = obj.get("train", {})
        if not isinstance(train, dict):
            raise UsageError("config.train must be an object")
        _reject_unknown(train, _TRAIN_KEYS, "config.train")
        self.train_section = train

        self.datasets = []
        for i, entry in enumerate(obj.get("datasets", [])):
            where = f"config.datasets[{i}]"
            if not isinstance(entry, dict):
                raise UsageError(f"{where} must be an object")
            _reject_unknown(entry, _DATASET_KEYS, where)
            name = _require(entry, "name", where, str)
            index = _require(entry, "dataset_index", where, int)
            path = _require(entry, "path", where, str)
            role = entry.get("role", "pretrain")
            if role not in ("pretrain", "target"):
                raise UsageError(f"{where}.role must be 'pretrain' or 'target'")
            self.datasets.append({"name": name, "dataset_index": index,
                                  "path": path, "role": role})
        names = [d["name"] for d in self.datasets]
        if len(set(names)) != len(names):
            raise UsageError("config.datasets names must be unique")
        indexes = [d["dataset_index"] for d in self.datasets]
        if len(set(indexes)) != len(indexes):
            raise UsageError("config.datasets dataset_index values must be unique")

        synth = obj.get("synthetic", {})
        if not isinstance(synth, dict):
            raise UsageError("config.synthetic must be an object")
        self.synthetic = {}
        for name, entry in synth.items():
            where = f"config.synthetic.{name}"
            if not isinstance(entry, dict):
                raise UsageError(f"{where} must be an object")
            _reject_unknown(entry, _SYNTH_KEYS, where)
            self.synthetic[name] = dict(entry)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        return cls(obj, base_dir=path.parent)

    # -- derived pieces ------------------------------------------------------

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)

    def dataset_entry(self, name):
        for d in self.datasets:
            if d["name"] == name:
                return d
        raise UsageError(f"dataset {name!r} not in config.datasets")

    def train_config(self, stage, seed):
        return TrainConfig(seed=stage_seed(seed, stage), **self.train_section)

    def model_config(self, vocab):
        section = dict(self.model_section)
        if "preset" in section:
            preset = section.pop("preset")
            cfg = ModelConfig.from_preset(preset, **section)
        else:
            for key in ("n_layers", "d_model", "n_head", "d_ff"):
                if key not in section:
                    raise UsageError(f"config.model needs {key!r} (or a preset)")
            cfg = ModelConfig(**section)
        cfg = cfg.sized_for(vocab)
        cfg.validate()
        return cfg

    def prepared_dir(self, name):
        return self.workdir / "prepared" / name

    def ensure_dir(self, *parts):
        d = self.workdir.joinpath(*parts)
        d.mkdir(parents=True, exist_ok=True)
        return d


# ---------------------------------------------------------------------------
# prepared-dataset persistence


def write_prepared(cfg, name, entry, splits, n_questions, n_kcs):
    out = cfg.ensure_dir("prepared", name)
    counts = {}
    for split_name, segments in splits:
        write_blocks(segments, out / f"{split_name}.txt")
        counts[split_name] = len(segments)
    meta = {"name": name, "dataset_index": entry["dataset_index"],
            "role": entry["role"], "n_questions": n_questions, "n_kcs": n_kcs,
            "segments": counts}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n",
                                   encoding="utf-8")
    return meta


def read_prepared(cfg, name):
    d = cfg.prepared_dir(name)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise UsageError(f"dataset {name!r} is not prepared (missing {meta_path}); "
                         "run the preprocess command first")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    splits = Splits(train=ingest(d / "train.txt"),
                    valid=ingest(d / "valid.txt"),
                    test=ingest(d / "test.txt"))
    spec = DatasetSpec(meta["name"], meta["dataset_index"], str(d))
    return PreparedDataset(spec=spec, splits=splits,
                           n_questions=meta["n_questions"], n_kcs=meta["n_kcs"])


def adapt_if_needed(ckpt, prepared, seed):
    """Model from a checkpoint, vocabulary extended to the target if unseen.

    The adaptation seed depends only on (global seed, dataset name), so
    the importance and finetune commands start from identical embeddings.
    """
    model = ckpt.build_model()
    known = {(n, i) for n, i, _, _ in model.vocab.entries}
    key = (prepared.spec.name, prepared.spec.dataset_index)
    if key in known:
        return model, False
    expected_index = model.vocab.n_datasets
    if prepared.spec.dataset_index != expected_index:
        raise ValueError(
            f"target dataset {prepared.spec.name!r} has dataset_index "
            f"{prepared.spec.dataset_index} but the checkpoint assigns new "
            f"datasets index {expected_index}")
    model = zero_shot_adapt(model, prepared.spec.name, prepared.n_questions,
                            prepared.n_kcs,
                            seed=stage_seed(seed, "adapt", prepared.spec.name))
    logger.info("adapted checkpoint to %s (index %d)", prepared.spec.name,
                expected_index)
    return model, True


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, args):
    if not cfg.synthetic:
        raise UsageError("config has no 'synthetic' section")
    name = args.dataset
    if name is None:
        if len(cfg.synthetic) != 1:
            raise UsageError(f"--dataset required; config defines "
                             f"{sorted(cfg.synthetic)}")
        name = next(iter(cfg.synthetic))
    if name not in cfg.synthetic:
        raise UsageError(f"no synthetic config for {name!r}; "
                         f"choose from {sorted(cfg.synthetic)}")
    section = dict(cfg.synthetic[name])
    if args.seed is not None:
        section["seed"] = stage_seed(args.seed, "synth", name)
    else:
        section.setdefault("seed", stage_seed(cfg.seed, "synth", name))
    synth_cfg = SyntheticConfig(**section)
    sequences, truth = generate_synthetic(synth_cfg)

    if args.out:
        out_prefix = cfg.resolve(args.out)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
    else:
        out_prefix = cfg.ensure_dir("data") / name
    data_path = Path(f"{out_prefix}.txt")
    write_blocks(sequences, data_path)
    write_truth_sidecar(truth, sequences, f"{out_prefix}.truth.json")
    n_inter = sum(len(s) for s in sequences)
    logger.info("synthesized %s: %d students, %d interactions", name,
                len(sequences), n_inter)
    return {"command": "synth", "dataset": name, "path": str(data_path),
            "truth": f"{out_prefix}.truth.json", "students": len(sequences),
            "interactions": n_inter, "seed": synth_cfg.seed}


def cmd_preprocess(cfg, args):
    entries = cfg.datasets
    if args.dataset:
        entries = [cfg.dataset_entry(args.dataset)]
    if not entries:
        raise UsageError("config.datasets is empty")
    seed = args.seed if args.seed is not None else cfg.seed
    summary = []
    for entry in entries:
        path = cfg.resolve(entry["path"])
        if not path.exists():
            raise UsageError(f"dataset file {path} does not exist")
        sequences = ingest(path)
        splits = preprocess(sequences, seed=stage_seed(seed, "preprocess",
                                                       entry["name"]))
        n_q, n_k = observed_id_sizes(sequences)
        meta = write_prepared(cfg, entry["name"], entry, splits, n_q, n_k)
        summary.append({"dataset": entry["name"], **meta["segments"]})
        logger.info("prepared %s: %s", entry["name"], meta["segments"])
    return {"command": "preprocess", "datasets": summary}


def _load_role(cfg, role):
    out = [read_prepared(cfg, e["name"]) for e in cfg.datasets if e["role"] == role]
    return out


def cmd_pretrain(cfg, args):
    datasets = _load_role(cfg, "pretrain")
    if not datasets:
        raise UsageError("no datasets with role 'pretrain' in config")
    vocab = build_vocab([d.spec for d in datasets],
                        {d.spec.name: (d.n_questions, d.n_kcs) for d in datasets})
    model_cfg = cfg.model_config(vocab)
    seed = args.seed if args.seed is not None else cfg.seed
    model = KTModel.build(model_cfg, vocab, seed=stage_seed(seed, "init"))
    logger.info("built model: %d parameters, %d datasets", model.n_params,
                vocab.n_datasets)
    ckpt = pretrain(model, datasets, cfg.train_config("pretrain", seed))
    out = cfg.resolve(args.out) if args.out \
        else cfg.ensure_dir("checkpoints") / "pretrained.lrkt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    return {"command": "pretrain", "checkpoint": str(out),
            "n_params": model.n_params,
            "best_epoch": ckpt.metadata["best_epoch"],
            "best_val_auc": ckpt.metadata["best_val_auc"],
            "epochs_run": ckpt.metadata["epochs_run"]}


def cmd_importance(cfg, args):
    ckpt = load_checkpoint(cfg.resolve(args.checkpoint))
    prepared = read_prepared(cfg, args.dataset)
    seed = args.seed if args.seed is not None else cfg.seed
    model, _ = adapt_if_needed(ckpt, prepared, seed)
    batch_size = cfg.train_section.get("batch_size", TrainConfig().batch_size)
    profile = compute_importance(model, prepared, batch_size=batch_size)
    out = cfg.resolve(args.out) if args.out \
        else cfg.ensure_dir("profiles") / f"{args.dataset}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    profile.save(out)
    return {"command": "importance", "dataset": args.dataset, "profile": str(out),
            "n_samples": profile.n_samples, "layers": len(profile.layers)}


def cmd_finetune(cfg, args):
    ckpt = load_checkpoint(cfg.resolve(args.checkpoint))
    prepared = read_prepared(cfg, args.dataset)
    seed = args.seed if args.seed is not None else cfg.seed
    model, adapted = adapt_if_needed(ckpt, prepared, seed)
    if adapted:
        ckpt = Checkpoint.from_model(
            model, ckpt.dataset_specs + [prepared.spec],
            {**ckpt.metadata, "adapted_to": prepared.spec.name})
    profile = None
    if args.profile:
        profile = ImportanceProfile.load(cfg.resolve(args.profile))
    train_cfg = cfg.train_config("finetune", seed)
    tuned = finetune(ckpt, prepared, train_cfg, profile=profile)
    out = cfg.resolve(args.out) if args.out \
        else cfg.ensure_dir("checkpoints") / f"finetuned-{args.dataset}.lrkt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tuned, out)

    reports = evaluate(tuned.build_model(),
                       [(prepared.spec.name, prepared.spec.dataset_index, "test",
                         prepared.splits.test)],
                       batch_size=train_cfg.batch_size)
    rdir = cfg.ensure_dir("reports")
    write_reports_json(reports, rdir / f"finetune-{args.dataset}.json")
    write_reports_csv(reports, rdir / f"finetune-{args.dataset}.csv")
    return {"command": "finetune", "dataset": args.dataset, "checkpoint": str(out),
            "with_profile": bool(args.profile),
            "best_val_auc": tuned.metadata["best_val_auc"],
            "test": reports_to_json(reports)}


def cmd_eval(cfg, args):
    ckpt = load_checkpoint(cfg.resolve(args.checkpoint))
    names = [args.dataset] if args.dataset else [
        e["name"] for e in cfg.datasets if cfg.prepared_dir(e["name"]).exists()]
    if not names:
        raise UsageError("no prepared datasets to evaluate")
    seed = args.seed if args.seed is not None else cfg.seed
    reports = []
    batch_size = cfg.train_section.get("batch_size", TrainConfig().batch_size)
    for prepared in (read_prepared(cfg, name) for name in names):
        model, _ = adapt_if_needed(ckpt, prepared, seed)
        splits = [(prepared.spec.name, prepared.spec.dataset_index, split, segs)
                  for split, segs in prepared.splits
                  if split in ("valid", "test") and segs]
        reports.extend(evaluate(model, splits, batch_size=batch_size))
    out_prefix = cfg.resolve(args.out) if args.out \
        else cfg.ensure_dir("reports") / "eval"
    Path(out_prefix).parent.mkdir(parents=True, exist_ok=True)
    write_reports_json(reports, f"{out_prefix}.json")
    write_reports_csv(reports, f"{out_prefix}.csv")
    return {"command": "eval", "reports": str(out_prefix) + ".json",
            "results": reports_to_json(reports)}


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser():
    parser = _Parser(prog="kttrace",
                     description="knowledge-tracing pipeline: synthesize, "
                                 "preprocess, pre-train, probe importance, "
                                 "fine-tune, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, dataset=None, profile=False, out=None):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's global seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="input checkpoint")
        if dataset is not None:
            p.add_argument("--dataset", required=dataset == "required",
                           default=None, help="dataset name from the config")
        if profile:
            p.add_argument("--profile", default=None,
                           help="importance profile JSON (omit for plain fine-tuning)")
        if out:
            p.add_argument("--out", default=None, help=out)

    common(sub.add_parser("synth", help="generate a synthetic dataset"),
           dataset="optional", out="output path prefix (.txt/.truth.json)")
    common(sub.add_parser("preprocess", help="ingest, filter, segment and split"),
           dataset="optional")
    common(sub.add_parser("pretrain", help="train on all role=pretrain datasets"),
           out="checkpoint output path")
    common(sub.add_parser("importance", help="compute an importance profile"),
           checkpoint=True, dataset="required", out="profile output path")
    common(sub.add_parser("finetune", help="fine-tune a checkpoint on one dataset"),
           checkpoint=True, dataset="required", profile=True,
           out="checkpoint output path")
    common(sub.add_parser("eval", help="evaluate a checkpoint"),
           checkpoint=True, dataset="optional", out="report output path prefix")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "importance": cmd_importance,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
}


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        cfg = ExperimentConfig.load(args.config)
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        summary = _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        logger.error("usage error: %s", exc)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        logger.error("missing input: %s", exc)
        return EXIT_USAGE
    except (NumericalError, TrainingDivergedError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (DataFormatError, ValueError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    summary["elapsed_s"] = round(time.time() - started, 3)
    print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
