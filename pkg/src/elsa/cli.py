"""Command-line entry point wiring the full pipeline.

Every subcommand reads the same JSON config (unknown keys rejected),
echoes the effective config into its run directory, and writes a JSON
report plus a log.  Exit codes: 0 ok, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, evalkit
from . import model as mdl
from .captions import (
    RephraserEndpoint,
    attrs_to_descriptors,
    build_llm_prompt,
    rephrase_external,
)
from .roomsim import RoomSampler, spatialize

log = logging.getLogger("elsa")


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    win: int = 512
    hop: int = 256
    mel_bands: int = 48

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CorpusConfig:
    classes: tuple[str, ...] = tuple(dataio.CLASS_PHRASES)
    directions: tuple[str, ...] = tuple(dataio.DIRECTION_BINS)
    distances: tuple[str, ...] = tuple(dataio.DISTANCE_BINS)
    base_clips_per_cell: dict = field(
        default_factory=lambda: {"train": 21, "val": 4, "test": 10}
    )
    train_augmentations: int = 2
    sample_rate: int = 16000
    max_image_order: int = 6
    include_mono: bool = True

    def as_dict(self):
        d = dataclasses.asdict(self)
        for k in ("classes", "directions", "distances"):
            d[k] = list(d[k])
        return d

    def to_spec(self, seed: int) -> dataio.SyntheticCorpusSpec:
        return dataio.SyntheticCorpusSpec(
            classes=tuple(self.classes),
            directions=tuple(self.directions),
            distances=tuple(self.distances),
            base_clips_per_cell=dict(self.base_clips_per_cell),
            train_augmentations=self.train_augmentations,
            sample_rate=self.sample_rate,
            seed=seed,
            max_image_order=self.max_image_order,
            include_mono=self.include_mono,
        )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0 = logical core count
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: mdl.ElsaConfig = field(default_factory=mdl.ElsaConfig)
    train: mdl.TrainConfig = field(default_factory=mdl.TrainConfig)

    def as_dict(self):
        return {
            "seed": self.seed,
            "workers": self.workers,
            "corpus": self.corpus.as_dict(),
            "features": self.features.as_dict(),
            "model": self.model.as_dict(),
            "train": dataclasses.asdict(self.train),
        }

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


def _strict_build(cls, data: dict, path: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys at {path}: {sorted(unknown)}")
    return data


def load_config(path: str | None, seed_override: int | None, workers_override: int | None) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise MissingInputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    _strict_build(RunConfig, data, "$")
    corpus = CorpusConfig(**_strict_build(CorpusConfig, data.get("corpus", {}), "$.corpus"))
    features = FeatureConfig(**_strict_build(FeatureConfig, data.get("features", {}), "$.features"))
    model_cfg = mdl.ElsaConfig.from_dict(
        {**mdl.ElsaConfig().as_dict(), **_strict_build(mdl.ElsaConfig, data.get("model", {}), "$.model")}
    )
    train_cfg = mdl.TrainConfig(
        **_strict_build(mdl.TrainConfig, data.get("train", {}), "$.train")
    )
    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        workers=int(data.get("workers", 0)),
        corpus=corpus,
        features=features,
        model=model_cfg,
        train=train_cfg,
    )
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=seed_override)
    if workers_override is not None:
        cfg = dataclasses.replace(cfg, workers=workers_override)
    return cfg


def _setup_run_dir(out: str, cfg: RunConfig, stage: str) -> tuple[Path, logging.Handler]:
    run = Path(out)
    (run / "logs").mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n")
    handler = logging.FileHandler(run / "logs" / f"{stage}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    logging.getLogger().setLevel(logging.INFO)
    return run, handler


def _write_report(run: Path, payload: dict) -> None:
    (run / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _load_corpus(corpus_dir: str):
    corpus = Path(corpus_dir)
    manifest = _require(corpus / "manifest.jsonl", "corpus manifest")
    records = dataio.read_manifest(manifest)
    cache_path = _require(corpus / "features.bin", "feature cache (run featurize first)")
    cache = dataio.read_feature_cache(cache_path)
    return records, cache


def _split_records(records, split: str, spatial: bool):
    return [r for r in records if r.split == split and r.is_spatial == spatial]


# ------------------------------------------------------------------ stages


def cmd_synth_corpus(args, cfg: RunConfig) -> dict:
    run = Path(args.out)
    spec = cfg.corpus.to_spec(cfg.seed)
    manifest = dataio.make_synthetic_corpus(spec, run, workers=cfg.effective_workers())
    records = dataio.read_manifest(manifest)
    rephrased = 0
    fallbacks = 0
    url = args.rephraser_url or os.environ.get("ELSA_REPHRASER_URL")
    if url:
        endpoint = RephraserEndpoint(url=url)
        spatial = [r for r in records if r.is_spatial]

        def redo(rec):
            prompt = build_llm_prompt(rec.original_caption, attrs_to_descriptors(rec.attributes))
            text, fell_back = rephrase_external(prompt, endpoint, rec.spatial_caption)
            return rec.id, text, fell_back

        with ThreadPoolExecutor(max_workers=min(8, cfg.effective_workers())) as pool:
            for rid, text, fell_back in pool.map(redo, spatial):
                fallbacks += fell_back
                rephrased += not fell_back
                if not fell_back:
                    idx = next(i for i, r in enumerate(records) if r.id == rid)
                    records[idx] = dataclasses.replace(records[idx], spatial_caption=text)
        dataio.write_manifest(manifest, records)
    counts = {}
    for r in records:
        key = f"{r.split}/{'spatial' if r.is_spatial else 'mono'}"
        counts[key] = counts.get(key, 0) + 1
    return {
        "manifest": str(manifest),
        "records": len(records),
        "counts": counts,
        "rephrased": rephrased,
        "rephrase_fallbacks": fallbacks,
    }


def cmd_simulate(args, cfg: RunConfig) -> dict:
    run = Path(args.out)
    audio, sr = dataio.read_mono_wav(_require(Path(args.audio), "input audio"))
    sampler = RoomSampler("train", seed=cfg.seed, max_image_order=cfg.corpus.max_image_order)
    room = sampler.sample()
    foa, attrs = spatialize(audio, room, sr)
    out_wav = run / "spatialized.wav"
    dataio.write_foa_wav(out_wav, foa)
    return {
        "output": str(out_wav),
        "attributes": attrs.as_dict(),
        "descriptors": dataclasses.asdict(attrs_to_descriptors(attrs)),
        "room_seed": room.seed,
    }


def cmd_featurize(args, cfg: RunConfig) -> dict:
    corpus = Path(args.corpus)
    _require(corpus / "manifest.jsonl", "corpus manifest")
    out = dataio.featurize_corpus(
        corpus,
        corpus / "features.bin",
        cfg.features.as_dict(),
        cfg.model.sem_time_cells,
        cfg.model.spa_time_cells,
        cfg.model.spa_freq_cells,
        workers=cfg.effective_workers(),
    )
    cache = dataio.read_feature_cache(out)
    return {"cache": str(out), "clips": len(cache)}


def cmd_train(args, cfg: RunConfig) -> dict:
    run = Path(args.out)
    records, cache = _load_corpus(args.corpus)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    ckpt = run / "checkpoints" / "best.bin"
    train_cfg = dataclasses.replace(cfg.train, checkpoint_path=str(ckpt), seed=cfg.seed)
    model = mdl.ElsaModel(cfg.model, seed=cfg.seed)

    def log_epoch(entry):
        log.info(
            "epoch %d total %.4f (clip %.4f dir %.4f dist %.4f area %.4f) "
            "val mAP@10 %.4f R@1 %.3f/%.3f R@5 %.3f/%.3f R@10 %.3f/%.3f",
            entry["epoch"],
            entry["loss"]["total"],
            entry["loss"]["clip"],
            entry["loss"]["dir"],
            entry["loss"]["dist"],
            entry["loss"]["area"],
            entry["val"]["map10"],
            entry["val"]["a2t"]["r1"],
            entry["val"]["t2a"]["r1"],
            entry["val"]["a2t"]["r5"],
            entry["val"]["t2a"]["r5"],
            entry["val"]["a2t"]["r10"],
            entry["val"]["t2a"]["r10"],
        )

    history = mdl.train_model(model, records, cache, train_cfg, log_fn=log_epoch)
    return {"checkpoint": str(ckpt), "history": history}


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    records, cache = _load_corpus(args.corpus)
    model = mdl.load_model(_require(Path(args.checkpoint), "checkpoint"))
    out: dict = {"split": args.split}
    for name, spatial in (("spatial", True), ("mono", False)):
        subset = _split_records(records, args.split, spatial)
        if not subset:
            continue
        za, zt = mdl.encode_corpus(model, subset, cache)
        out[name] = evalkit.retrieval_report(za, zt).as_dict()
    return out


_PROBE_TASKS = {
    "direction": ("left", "right", "front", "back"),
    "distance": ("near", "far"),
    "elevation": ("up", "down"),
    "room_size": ("small", "large"),
    "reverb": ("highly reverberant", "acoustically dampened"),
}

_DESCRIPTOR_FIELD = {
    "direction": "direction",
    "distance": "distance",
    "elevation": "elevation",
    "room_size": "room_size",
    "reverb": "reverb",
}


def zeroshot_report(model: mdl.ElsaModel, records, cache, split: str = "test") -> dict:
    """Zero-shot templated-probe classification per attribute dimension."""
    subset = _split_records(records, split, spatial=True)
    if not subset:
        raise MissingInputError(f"no spatial records in split {split!r}")
    za, _ = mdl.encode_corpus(model, subset, cache)

    def encode_text(caption):
        return model.text_encoder([caption]).data[0]

    report = {}
    for task, classes in _PROBE_TASKS.items():
        field_name = _DESCRIPTOR_FIELD[task]
        labels, embeddings = [], []
        for rec, emb in zip(subset, za):
            value = getattr(attrs_to_descriptors(rec.attributes), field_name)
            if value in classes:
                labels.append(value)
                embeddings.append(emb)
        if not labels or len(set(labels)) < 2:
            report[task] = {"accuracy": None, "n": len(labels), "note": "too few classes present"}
            continue
        probes = evalkit.build_probe_embeddings(encode_text, classes)
        acc, confusion = evalkit.zeroshot_classify(np.array(embeddings), labels, probes)
        report[task] = {"accuracy": acc, "n": len(labels), "confusion": confusion}
    return report


def cmd_probe(args, cfg: RunConfig) -> dict:
    records, cache = _load_corpus(args.corpus)
    model = mdl.load_model(_require(Path(args.checkpoint), "checkpoint"))
    return zeroshot_report(model, records, cache, split=args.split)


def _direction_labels(records):
    labels = []
    keep = []
    for i, r in enumerate(records):
        d = attrs_to_descriptors(r.attributes).direction
        if d is not None:
            labels.append(d)
            keep.append(i)
    return labels, keep


def cmd_swap(args, cfg: RunConfig) -> dict:
    records, cache = _load_corpus(args.corpus)
    model = mdl.load_model(_require(Path(args.checkpoint), "checkpoint"))

    train_sp = _split_records(records, "train", True)
    test_sp = _split_records(records, args.split, True)
    za_train, _ = mdl.encode_corpus(model, train_sp, cache)
    za_test, _ = mdl.encode_corpus(model, test_sp, cache)
    train_labels, train_keep = _direction_labels(train_sp)
    test_labels, test_keep = _direction_labels(test_sp)

    classifier, clf_metrics = evalkit.train_probe(
        za_train[train_keep],
        train_labels,
        za_test[test_keep],
        test_labels,
        task="direction_4class",
        seed=cfg.seed,
    )
    protos = evalkit.DirectionPrototypes.from_text_encoder(
        lambda caption: model.text_encoder([caption]).data[0]
    )
    result = evalkit.swap_experiment(za_test[test_keep], test_labels, protos, classifier)
    result["probe_test_accuracy"] = clf_metrics["accuracy"]
    return result


def cmd_doa(args, cfg: RunConfig) -> dict:
    records, cache = _load_corpus(args.corpus)
    model = mdl.load_model(_require(Path(args.checkpoint), "checkpoint"))
    train_sp = _split_records(records, "train", True)
    test_sp = _split_records(records, args.split, True)
    za_train, _ = mdl.encode_corpus(model, train_sp, cache)
    za_test, _ = mdl.encode_corpus(model, test_sp, cache)

    def targets(recs):
        return np.stack(
            [
                mdl.direction_vector(r.attributes.azimuth_deg, r.attributes.elevation_deg)
                for r in recs
            ]
        )

    probe, metrics = evalkit.train_probe(
        za_train, targets(train_sp), za_test, targets(test_sp), task="doa_regression", seed=cfg.seed
    )
    preds = probe.predict(za_test)
    breakdown = evalkit.doa_error_breakdown(
        preds, targets(test_sp), [r.attributes for r in test_sp]
    )
    table = evalkit.breakdown_table(breakdown)
    run = Path(args.out)
    (run / "doa_breakdown.txt").write_text(table + "\n")
    print(table)
    return {"mae_deg": metrics["mae_deg"], "breakdown": breakdown}


def cmd_export_embeddings(args, cfg: RunConfig) -> dict:
    records, cache = _load_corpus(args.corpus)
    model = mdl.load_model(_require(Path(args.checkpoint), "checkpoint"))
    subset = _split_records(records, args.split, spatial=True)
    za, zt = mdl.encode_corpus(model, subset, cache)
    run = Path(args.out)
    out_bin = run / f"embeddings_{args.split}.bin"
    dataio.write_matrices(out_bin, {"audio": za, "text": zt})
    labels = [
        {
            "id": r.id,
            "attributes": r.attributes.as_dict(),
            "descriptors": dataclasses.asdict(attrs_to_descriptors(r.attributes)),
        }
        for r in subset
    ]
    (run / f"embeddings_{args.split}_labels.json").write_text(
        json.dumps(labels, indent=2, sort_keys=True) + "\n"
    )
    return {"embeddings": str(out_bin), "n": len(subset), "dim": int(za.shape[1])}


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elsa",
        description="Spatial audio + language embedding pipeline (desk scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=False, checkpoint=False, audio=False, split=None):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workers", type=int, default=None, help="override worker count")
        p.add_argument("--out", required=True, help="run/output directory")
        p.add_argument("--rephraser-url", default=None, help="external rephraser endpoint")
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint path")
        if audio:
            p.add_argument("--audio", required=True, help="input mono WAV")
        if split:
            p.add_argument("--split", default=split, choices=["train", "val", "test"])

    common(sub.add_parser("synth-corpus", help="generate the synthetic corpus"))
    common(sub.add_parser("simulate", help="spatialize one mono WAV"), audio=True)
    common(sub.add_parser("featurize", help="extract cached model features"), corpus=True)
    common(sub.add_parser("train", help="train the dual encoder"), corpus=True)
    common(sub.add_parser("evaluate", help="retrieval metrics"), corpus=True, checkpoint=True, split="test")
    common(sub.add_parser("probe", help="zero-shot spatial classification"), corpus=True, checkpoint=True, split="test")
    common(sub.add_parser("swap", help="direction swap/removal experiment"), corpus=True, checkpoint=True, split="test")
    common(sub.add_parser("doa", help="downstream DOA regression probe"), corpus=True, checkpoint=True, split="test")
    common(sub.add_parser("export-embeddings", help="dump embeddings + labels"), corpus=True, checkpoint=True, split="test")
    return parser


_COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "simulate": cmd_simulate,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "swap": cmd_swap,
    "doa": cmd_doa,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.workers)
        run = _setup_run_dir(args.out, cfg, args.command)
        report = _COMMANDS[args.command](args, cfg)
        _write_report(run, {"command": args.command, **report})
        log.info("%s done", args.command)
        return 0
    except (ConfigError, MissingInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - internal failures
        logging.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
