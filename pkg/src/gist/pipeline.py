"""End-to-end pipeline orchestration from a single declarative config.

Stage order: generate captions -> match -> summarize matched captions ->
contrastive fine-tune -> linear probe -> evaluate. Each stage writes its
outputs under ``runs/<experiment_id>/<stage>/`` together with a
``stage.json`` carrying the content hash of its inputs; a rerun with
unchanged inputs skips the stage and reuses the stored outputs. The run
manifest records config, seeds, and all stage hashes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import classifier, evaluate, plotting
from .captions import (
    CaptionStore,
    FixtureProvider,
    PromptTemplate,
    RemoteProvider,
    ResponseCache,
    discarded_ids,
    generate_class_captions,
    render_prompts,
    summarize_caption,
)
from .embedding import make_backend
from .errors import ConfigError, GistError
from .manifest import DatasetManifest, load_manifest
from .matcher import CAPTION_TEXT_MODES, MatchAssignment, build_pair_dataset, match_manifest
from .trainer import TrainableProjectionBackend, TrainConfig, finetune

STAGES = ("captions", "match", "summarize", "finetune", "probe", "eval")


class StageFailure(GistError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    experiment_id: str
    dataset: str
    backend: dict = field(default_factory=dict)
    captions: dict = field(default_factory=dict)
    match: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    runs_root: str = "runs"

    def __post_init__(self):
        if not Path(self.dataset).exists():
            raise ConfigError(f"dataset manifest not found: {self.dataset}")
        n = int(self.match.get("n", 3))
        if not 1 <= n <= 5:
            raise ConfigError(f"match.n must be in [1, 5], got {n}")
        mode = self.match.get("mode", "short_with_class")
        if mode not in CAPTION_TEXT_MODES:
            raise ConfigError(f"match.mode must be one of {CAPTION_TEXT_MODES}")
        provider = self.captions.get("provider", "fixture")
        if provider not in ("remote", "fixture"):
            raise ConfigError(f"captions.provider must be 'remote' or 'fixture'")
        if provider == "fixture":
            fixture = self.captions.get("fixture")
            if not fixture or not Path(fixture).exists():
                raise ConfigError(f"captions.fixture file not found: {fixture}")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def canonical_hash(obj: Any) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _StageRunner:
    """Content-addressed skip logic: a stage with an unchanged input hash
    and intact outputs is not re-executed."""

    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.hashes: dict[str, str] = {}

    def run(self, stage: str, input_hash: str, produce: Callable[[Path], list[Path]]) -> list[Path]:
        stage_dir = self.run_dir / stage
        marker = stage_dir / "stage.json"
        if marker.exists():
            try:
                meta = json.loads(marker.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                meta = {}
            outputs = [stage_dir / name for name in meta.get("outputs", [])]
            if meta.get("input_hash") == input_hash and all(p.exists() for p in outputs):
                self.hashes[stage] = meta["output_hash"]
                return outputs
        stage_dir.mkdir(parents=True, exist_ok=True)
        try:
            outputs = produce(stage_dir)
        except Exception as exc:
            raise StageFailure(stage, exc) from exc
        output_hash = canonical_hash([_file_hash(p) for p in outputs])
        marker.write_text(
            json.dumps(
                {
                    "input_hash": input_hash,
                    "output_hash": output_hash,
                    "outputs": [p.name for p in outputs],
                }
            ),
            encoding="utf-8",
        )
        self.hashes[stage] = output_hash
        return outputs


def _build_provider(captions_cfg: dict):
    if captions_cfg.get("provider", "fixture") == "fixture":
        return FixtureProvider(captions_cfg["fixture"])
    return RemoteProvider(
        endpoint=captions_cfg["endpoint"],
        model_id=captions_cfg.get("model_id", "gpt-4"),
        temperature=captions_cfg.get("temperature", 0.7),
        top_p=captions_cfg.get("top_p", 1.0),
    )


def _build_template(captions_cfg: dict) -> PromptTemplate:
    template_cfg = captions_cfg.get("template")
    if template_cfg is None:
        raise ConfigError("captions.template is required")
    axis_values = template_cfg.get("axis_values")
    return PromptTemplate(
        template_id=template_cfg["template_id"],
        body=template_cfg["body"],
        axis_name=template_cfg.get("axis_name"),
        axis_values=tuple(axis_values) if axis_values else None,
    )


def run_pipeline(
    config: PipelineConfig, workers: int = 1, until: str = "eval"
) -> evaluate.EvalReport | None:
    """Execute the pipeline and return the evaluation report.

    ``until`` stops after the named stage (used by the stage-level CLI
    commands); only a full run returns a report.
    """
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    manifest = load_manifest(config.dataset)
    backend_cfg = dict(config.backend)
    model_id = backend_cfg.pop("model_id", "synthetic-default")
    projection_dim = backend_cfg.pop("projection_dim", None)
    base_backend = make_backend(model_id, **backend_cfg)

    run_dir = Path(config.runs_root) / config.experiment_id
    run_dir.mkdir(parents=True, exist_ok=True)
    runner = _StageRunner(run_dir)
    manifest_hash = _file_hash(Path(config.dataset))

    # -- captions stage ------------------------------------------------------
    captions_cfg = dict(config.captions)
    provider = _build_provider(captions_cfg)
    template = _build_template(captions_cfg)
    per_prompt = int(captions_cfg.get("per_prompt", 5))
    m_min = int(captions_cfg.get("m_min", 1))
    m_max = int(captions_cfg.get("m_max", 60))
    verdicts_path = captions_cfg.get("verdicts")

    def _produce_captions(stage_dir: Path) -> list[Path]:
        cache = ResponseCache(stage_dir / "responses")
        records = []
        for class_name in manifest.classes:
            prompts = render_prompts(template, class_name)
            class_records = generate_class_captions(
                provider, class_name, prompts, per_prompt, template=template, cache=cache
            )
            if not m_min <= len(class_records) <= m_max:
                raise ConfigError(
                    f"class {class_name!r} produced {len(class_records)} captions, "
                    f"outside [{m_min}, {m_max}]"
                )
            records.extend(class_records)
        store = CaptionStore(dataset_name=manifest.name, records=records)
        out = stage_dir / "captions.jsonl"
        store.save(out)
        return [out]

    captions_hash = canonical_hash(
        {"manifest": manifest_hash, "template": template.__dict__,
         "per_prompt": per_prompt, "provider": provider.model_id,
         "m": [m_min, m_max]}
    )
    (captions_path,) = runner.run("captions", captions_hash, _produce_captions)
    store = CaptionStore.load(captions_path)
    discarded = discarded_ids(verdicts_path) if verdicts_path else set()
    if until == "captions":
        return None

    # -- match stage ---------------------------------------------------------
    n = int(config.match.get("n", 3))
    mode = config.match.get("mode", "short_with_class")

    def _produce_match(stage_dir: Path) -> list[Path]:
        assignments = match_manifest(manifest, store, base_backend, n, discarded=discarded)
        out = stage_dir / "matches.jsonl"
        with out.open("w", encoding="utf-8", newline="\n") as fh:
            for a in assignments:
                fh.write(json.dumps(
                    {"image_id": a.image_id, "n": a.n, "ranked": list(a.ranked)}) + "\n")
        return [out]

    match_hash = canonical_hash(
        {"captions": runner.hashes["captions"], "manifest": manifest_hash,
         "backend": model_id, "n": n, "discarded": sorted(discarded)}
    )
    (match_path,) = runner.run("match", match_hash, _produce_match)
    assignments = []
    for line in match_path.read_text(encoding="utf-8").splitlines():
        obj = json.loads(line)
        assignments.append(MatchAssignment(
            image_id=obj["image_id"],
            ranked=tuple((cid, float(s)) for cid, s in obj["ranked"]),
            n=obj["n"],
        ))
    if until == "match":
        return None

    # -- summarize stage -----------------------------------------------------
    word_budget = int(captions_cfg.get("summary_word_budget", 30))

    def _produce_summaries(stage_dir: Path) -> list[Path]:
        cache = ResponseCache(stage_dir / "responses")
        matched = {cid for a in assignments for cid in a.caption_ids()}
        by_id = store.by_id()
        updated = []
        for rec in store.records:
            if rec.caption_id in matched and rec.short_text is None:
                short = summarize_caption(provider, rec.long_text,
                                          word_budget=word_budget, cache=cache)
                rec = type(rec)(
                    caption_id=rec.caption_id, label=rec.label, long_text=rec.long_text,
                    short_text=short, provenance=rec.provenance,
                )
            updated.append(rec)
        out = stage_dir / "captions_summarized.jsonl"
        CaptionStore(dataset_name=store.dataset_name, records=updated).save(out)
        return [out]

    summarize_hash = canonical_hash(
        {"match": runner.hashes["match"], "budget": word_budget,
         "provider": provider.model_id}
    )
    (summarized_path,) = runner.run("summarize", summarize_hash, _produce_summaries)
    store = CaptionStore.load(summarized_path)
    if until == "summarize":
        return None

    # -- finetune stage ------------------------------------------------------
    train_cfg = TrainConfig(**config.train)
    trainable = TrainableProjectionBackend(
        base_backend, out_dim=projection_dim, seed=train_cfg.seed,
        logit_scale=train_cfg.logit_scale_init,
    )
    pair_dataset = build_pair_dataset(
        manifest, store, base_backend, n, mode=mode,
        assignments=assignments, discarded=discarded,
    )

    def _produce_finetune(stage_dir: Path) -> list[Path]:
        tuned, log = finetune(trainable, pair_dataset, train_cfg, manifest)
        weights_path = stage_dir / "projections.npz"
        np.savez(weights_path, w_img=tuned.weights["w_img"], w_txt=tuned.weights["w_txt"],
                 logit_scale=np.array([tuned.logit_scale]))
        log_path = stage_dir / "train_log.json"
        log_path.write_text(json.dumps({
            "steps": log.steps, "diverged": log.diverged,
            "best_val_acc": log.best_val_acc, "selected_epoch": log.selected_epoch,
        }), encoding="utf-8")
        if log.steps:
            plotting.save_training_curve(
                [s["loss_sum"] for s in log.steps], stage_dir / "loss_curve.png")
        pairs_path = stage_dir / "pairs.jsonl"
        pair_dataset.save(pairs_path)
        return [weights_path, log_path, pairs_path]

    finetune_hash = canonical_hash(
        {"summaries": runner.hashes["summarize"], "mode": mode, "n": n,
         "train": config.train, "projection_dim": projection_dim,
         "backend": model_id}
    )
    finetune_outputs = runner.run("finetune", finetune_hash, _produce_finetune)
    weights = np.load(finetune_outputs[0])
    tuned = TrainableProjectionBackend(
        base_backend, out_dim=projection_dim, seed=train_cfg.seed)
    tuned.weights = {"w_img": weights["w_img"], "w_txt": weights["w_txt"]}
    tuned.logit_scale = float(weights["logit_scale"][0])
    if until == "finetune":
        return None

    # -- probe stage ---------------------------------------------------------
    probe_cfg = classifier.ProbeConfig(
        seed=train_cfg.seed, **config.eval.get("probe", {}))

    def _produce_probe(stage_dir: Path) -> list[Path]:
        train = manifest.split_records("train")
        embs = np.stack([v.values for v in tuned.encode_images([r.path for r in train])])
        probe = classifier.train_linear_probe(
            embs, [r.label for r in train], list(manifest.classes), probe_cfg)
        out = stage_dir / "probe.bin"
        classifier.save_probe(probe, out)
        return [out, out.with_suffix(".bin.json")]

    probe_hash = canonical_hash(
        {"finetune": runner.hashes["finetune"], "probe": probe_cfg.__dict__,
         "manifest": manifest_hash}
    )
    probe_outputs = runner.run("probe", probe_hash, _produce_probe)
    probe = classifier.load_probe(probe_outputs[0])
    if until == "probe":
        return None

    # -- eval stage ----------------------------------------------------------
    boot_cfg = evaluate.BootstrapConfig(
        resamples=int(config.eval.get("resamples", 1000)),
        seed=int(config.eval.get("seed", 0)),
    )

    def _produce_eval(stage_dir: Path) -> list[Path]:
        test = manifest.split_records("test")
        if not test:
            raise ConfigError("manifest has no test records to evaluate")
        embs = np.stack([v.values for v in tuned.encode_images([r.path for r in test])])
        scores = classifier.predict_matrix(probe, embs)
        truth = [list(manifest.classes).index(r.label) for r in test]
        k3 = min(3, len(manifest.classes))
        top1 = evaluate.bootstrap_accuracy(scores, truth, boot_cfg, k=1, workers=workers)
        top3 = evaluate.bootstrap_accuracy(scores, truth, boot_cfg, k=k3, workers=workers)
        report = evaluate.EvalReport(
            experiment_id=config.experiment_id,
            rows=[evaluate.MetricRow(
                setting="full",
                top1_mean=100 * top1[0], top1_std=100 * top1[1],
                top3_mean=100 * top3[0], top3_std=100 * top3[1],
            )],
            provenance={"stage_hashes": dict(runner.hashes),
                        "bootstrap": boot_cfg.__dict__},
        )
        json_path = stage_dir / "report.json"
        json_path.write_text(evaluate.render_report(report, "json"), encoding="utf-8")
        (stage_dir / "report.txt").write_text(
            evaluate.render_report(report, "table-text") + "\n", encoding="utf-8")
        evaluate.write_report_csv(report, stage_dir / "report.csv")
        plotting.save_report_figure(report, stage_dir / "report.png")
        return [json_path, stage_dir / "report.txt", stage_dir / "report.csv"]

    eval_hash = canonical_hash(
        {"probe": runner.hashes["probe"], "bootstrap": boot_cfg.__dict__}
    )
    eval_outputs = runner.run("eval", eval_hash, _produce_eval)
    report = evaluate.report_from_json(eval_outputs[0].read_text(encoding="utf-8"))

    run_manifest = {
        "experiment_id": config.experiment_id,
        "dataset": config.dataset,
        "dataset_hash": manifest_hash,
        "backend": model_id,
        "config": {
            "captions": {k: v for k, v in captions_cfg.items() if k != "template"},
            "match": config.match, "train": config.train, "eval": config.eval,
        },
        "stage_hashes": dict(runner.hashes),
    }
    (run_dir / "run_manifest.json").write_text(
        json.dumps(run_manifest, indent=2, sort_keys=True), encoding="utf-8")
    return report
