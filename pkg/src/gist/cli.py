"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 pipeline stage failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import classifier, evaluate, plotting
from .captions import (
    CaptionStore,
    FixtureProvider,
    PromptTemplate,
    RemoteProvider,
    ResponseCache,
    append_verdict,
    build_flyp_captions,
    discarded_ids,
    generate_class_captions,
    load_verdicts,
    render_prompts,
    summarize_caption,
)
from .embedding import EmbeddingCache, content_hash, make_backend
from .errors import ConfigError, GistError
from .manifest import (
    DuplicatePair,
    KShotSpec,
    find_near_duplicates,
    load_manifest,
    resolve_split_leakage,
    sample_kshot,
    save_manifest,
)
from .matcher import match_manifest
from .pipeline import PipelineConfig, StageFailure, run_pipeline

DEFAULT_CACHE_ROOT = os.environ.get("GIST_CACHE_ROOT", "cache")


def _backend_from_options(model_id: str, d: int, seed: int):
    kwargs = {"d": d, "seed": seed} if model_id.startswith("synthetic") else {}
    return make_backend(model_id, **kwargs)


@click.group()
def cli():
    """GIST pipeline: generate, match, summarize, fine-tune, classify, evaluate."""


# --- data -------------------------------------------------------------------

@cli.group()
def data():
    """Dataset manifest operations."""


@data.command("validate")
@click.argument("manifest_path", type=click.Path(exists=True))
def data_validate(manifest_path):
    manifest = load_manifest(manifest_path)
    counts = manifest.split_counts()
    click.echo(
        f"OK: {manifest.name}: {len(manifest.classes)} classes, "
        f"{len(manifest.records)} records "
        f"(train={counts['train']}, val={counts['val']}, test={counts['test']})"
    )


@data.command("kshot")
@click.argument("manifest_path", type=click.Path(exists=True))
@click.option("--k", required=True, type=int)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--clamp", is_flag=True, help="Take all images when a class has fewer than k.")
@click.option("-o", "--output", required=True, type=click.Path())
def data_kshot(manifest_path, k, seed, clamp, output):
    manifest = load_manifest(manifest_path)
    sampled = sample_kshot(manifest, KShotSpec(k=k, seed=seed, clamp=clamp))
    save_manifest(sampled, output)
    click.echo(f"wrote {output}: train={sampled.split_counts()['train']}")


@data.command("dedup")
@click.argument("manifest_path", type=click.Path(exists=True))
@click.option("--threshold", default=0.95605, type=float, show_default=True)
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--pairs-out", type=click.Path(), default=None,
              help="Write detected pairs as JSON Lines.")
@click.option("--resolve-out", type=click.Path(), default=None,
              help="Write a manifest with test-split leakage resolved.")
def data_dedup(manifest_path, threshold, model_id, d, seed, pairs_out, resolve_out):
    manifest = load_manifest(manifest_path)
    backend = _backend_from_options(model_id, d, seed)
    vecs = backend.encode_images([r.path for r in manifest.records])
    embeddings = {r.image_id: v for r, v in zip(manifest.records, vecs)}
    pairs = find_near_duplicates(embeddings, threshold)
    click.echo(f"{len(pairs)} near-duplicate pairs at threshold {threshold}")
    for pair in pairs:
        click.echo(f"  {pair.id_a}  {pair.id_b}  {pair.similarity:.5f}")
    if pairs_out:
        with open(pairs_out, "w", encoding="utf-8") as fh:
            for pair in pairs:
                fh.write(json.dumps(
                    {"id_a": pair.id_a, "id_b": pair.id_b,
                     "similarity": pair.similarity}) + "\n")
    if resolve_out:
        resolved = resolve_split_leakage(manifest, pairs)
        save_manifest(resolved, resolve_out)
        click.echo(f"wrote resolved manifest to {resolve_out}")


# --- captions -----------------------------------------------------------------

def _provider_from_options(provider, fixture, endpoint, model_id):
    if provider == "fixture":
        if not fixture:
            raise ConfigError("--fixture is required with the fixture provider")
        return FixtureProvider(fixture)
    if not endpoint:
        raise ConfigError("--endpoint is required with the remote provider")
    return RemoteProvider(endpoint=endpoint, model_id=model_id)


@cli.group()
def captions():
    """Caption generation, summarization, and review."""


@captions.command("generate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--template-file", required=True, type=click.Path(exists=True),
              help="JSON file with template_id, body, axis_name, axis_values.")
@click.option("--provider", type=click.Choice(["fixture", "remote"]), default="fixture",
              show_default=True)
@click.option("--fixture", type=click.Path(exists=True), default=None)
@click.option("--endpoint", default=None)
@click.option("--model-id", default="gpt-4", show_default=True)
@click.option("--per-prompt", default=5, type=int, show_default=True)
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path())
def captions_generate(manifest_path, template_file, provider, fixture, endpoint,
                      model_id, per_prompt, cache_dir, output):
    manifest = load_manifest(manifest_path)
    tmpl_raw = json.loads(Path(template_file).read_text(encoding="utf-8"))
    axis_values = tmpl_raw.get("axis_values")
    template = PromptTemplate(
        template_id=tmpl_raw["template_id"], body=tmpl_raw["body"],
        axis_name=tmpl_raw.get("axis_name"),
        axis_values=tuple(axis_values) if axis_values else None,
    )
    prov = _provider_from_options(provider, fixture, endpoint, model_id)
    cache = ResponseCache(cache_dir) if cache_dir else None
    records = []
    for class_name in manifest.classes:
        prompts = render_prompts(template, class_name)
        records.extend(generate_class_captions(
            prov, class_name, prompts, per_prompt, template=template, cache=cache))
    CaptionStore(dataset_name=manifest.name, records=records).save(output)
    click.echo(f"wrote {len(records)} captions to {output}")


@captions.command("flyp")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("-o", "--output", required=True, type=click.Path())
def captions_flyp(manifest_path, output):
    manifest = load_manifest(manifest_path)
    store = build_flyp_captions(list(manifest.classes), dataset_name=manifest.name)
    store.save(output)
    click.echo(f"wrote {len(store.records)} FLYP captions to {output}")


@captions.command("summarize")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--provider", type=click.Choice(["fixture", "remote"]), default="fixture",
              show_default=True)
@click.option("--fixture", type=click.Path(exists=True), default=None)
@click.option("--endpoint", default=None)
@click.option("--model-id", default="gpt-4", show_default=True)
@click.option("--word-budget", default=30, type=int, show_default=True)
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("-o", "--output", required=True, type=click.Path())
def captions_summarize(store_path, provider, fixture, endpoint, model_id,
                       word_budget, cache_dir, output):
    store = CaptionStore.load(store_path)
    prov = _provider_from_options(provider, fixture, endpoint, model_id)
    cache = ResponseCache(cache_dir) if cache_dir else None
    updated = []
    for rec in store.records:
        if rec.short_text is None:
            short = summarize_caption(prov, rec.long_text, word_budget=word_budget,
                                      cache=cache)
            rec = type(rec)(caption_id=rec.caption_id, label=rec.label,
                            long_text=rec.long_text, short_text=short,
                            provenance=rec.provenance)
        updated.append(rec)
    CaptionStore(dataset_name=store.dataset_name, records=updated).save(output)
    click.echo(f"wrote summarized store to {output}")


@captions.command("review")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--verdicts", required=True, type=click.Path(),
              help="JSON Lines sidecar; reviewing resumes where it left off.")
def captions_review(store_path, verdicts):
    store = CaptionStore.load(store_path)
    done = load_verdicts(verdicts)
    pending = [r for r in store.records if r.caption_id not in done]
    click.echo(f"{len(done)} already reviewed, {len(pending)} pending")
    for rec in pending:
        click.echo(f"\n[{rec.label}] {rec.long_text}")
        choice = click.prompt("keep/discard/quit", type=click.Choice(["k", "d", "q"]),
                              default="k")
        if choice == "q":
            break
        append_verdict(verdicts, rec.caption_id,
                       "keep" if choice == "k" else "discard")
    click.echo(f"verdicts saved to {verdicts}")


# --- embed --------------------------------------------------------------------

@cli.group()
def embed():
    """Encode images or texts into the embedding cache."""


@embed.command("images")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--cache-root", default=DEFAULT_CACHE_ROOT, show_default=True)
def embed_images(manifest_path, model_id, d, seed, cache_root):
    manifest = load_manifest(manifest_path)
    backend = _backend_from_options(model_id, d, seed)
    vecs = backend.encode_images([r.path for r in manifest.records])
    cache = EmbeddingCache(cache_root, backend.model_id, vecs[0].d if vecs else d)
    for rec, vec in zip(manifest.records, vecs):
        digest = content_hash(Path(rec.path).read_bytes())
        cache.put("image", digest, vec)
    click.echo(f"cached {len(vecs)} image embeddings under {cache_root}/{backend.model_id}")


@embed.command("texts")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--cache-root", default=DEFAULT_CACHE_ROOT, show_default=True)
def embed_texts(store_path, model_id, d, seed, cache_root):
    store = CaptionStore.load(store_path)
    backend = _backend_from_options(model_id, d, seed)
    texts = [r.long_text for r in store.records]
    vecs = backend.encode_texts(texts)
    cache = EmbeddingCache(cache_root, backend.model_id, vecs[0].d if vecs else d)
    for text, vec in zip(texts, vecs):
        cache.put("text", content_hash(text), vec)
    click.echo(f"cached {len(vecs)} text embeddings under {cache_root}/{backend.model_id}")


# --- match --------------------------------------------------------------------

@cli.command("match")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--store", "store_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--n", default=3, type=int, show_default=True)
@click.option("--verdicts", type=click.Path(), default=None)
@click.option("-o", "--output", required=True, type=click.Path())
def match_cmd(manifest_path, store_path, model_id, d, seed, n, verdicts, output):
    """Match each training image to its top-n same-label captions."""
    manifest = load_manifest(manifest_path)
    store = CaptionStore.load(store_path)
    backend = _backend_from_options(model_id, d, seed)
    discarded = discarded_ids(verdicts) if verdicts else set()
    assignments = match_manifest(manifest, store, backend, n, discarded=discarded)
    with open(output, "w", encoding="utf-8") as fh:
        for a in assignments:
            fh.write(json.dumps(
                {"image_id": a.image_id, "n": a.n, "ranked": list(a.ranked)}) + "\n")
    click.echo(f"wrote {len(assignments)} match assignments to {output}")


# --- pipeline-backed commands ---------------------------------------------------

@cli.command("finetune")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def finetune_cmd(config_path):
    """Run the pipeline through the fine-tuning stage."""
    config = PipelineConfig.load(config_path)
    run_pipeline(config, until="finetune")
    click.echo(f"fine-tuned projections under {config.runs_root}/{config.experiment_id}/finetune")


@cli.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--workers", default=1, type=int, show_default=True)
def run_cmd(config_path, workers):
    """Run the full pipeline and print the evaluation report."""
    config = PipelineConfig.load(config_path)
    report = run_pipeline(config, workers=workers)
    click.echo(evaluate.render_report(report, "table-text"))
    click.echo(f"artifacts under {config.runs_root}/{config.experiment_id}")


# --- probe / zeroshot -----------------------------------------------------------

@cli.group()
def probe():
    """Linear probe over frozen image embeddings."""


@probe.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--epochs", default=500, type=int, show_default=True)
@click.option("-o", "--output", required=True, type=click.Path())
def probe_train(manifest_path, model_id, d, seed, epochs, output):
    manifest = load_manifest(manifest_path)
    backend = _backend_from_options(model_id, d, seed)
    train = manifest.split_records("train")
    embs = np.stack([v.values for v in backend.encode_images([r.path for r in train])])
    head = classifier.train_linear_probe(
        embs, [r.label for r in train], list(manifest.classes),
        classifier.ProbeConfig(epochs=epochs, seed=seed))
    classifier.save_probe(head, output)
    click.echo(f"wrote probe to {output}")


@probe.command("predict")
@click.option("--probe-file", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]),
              show_default=True)
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("-o", "--output", required=True, type=click.Path(),
              help="Write scores + label indices as .npz for `gist eval`.")
def probe_predict(probe_file, manifest_path, split, model_id, d, seed, output):
    head = classifier.load_probe(probe_file)
    manifest = load_manifest(manifest_path)
    backend = _backend_from_options(model_id, d, seed)
    records = manifest.split_records(split)
    embs = np.stack([v.values for v in backend.encode_images([r.path for r in records])])
    scores = classifier.predict_matrix(head, embs)
    labels = np.array([head.class_order.index(r.label) for r in records])
    np.savez(output, scores=scores, labels=labels)
    click.echo(f"wrote scores for {len(records)} {split} images to {output}")


@cli.group()
def zeroshot():
    """Zero-shot classification from class-name templates."""


@zeroshot.command("build")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--template", "templates", multiple=True,
              help="May repeat; defaults to the standard photo/picture pair.")
@click.option("-o", "--output", required=True, type=click.Path())
def zeroshot_build(manifest_path, model_id, d, seed, templates, output):
    manifest = load_manifest(manifest_path)
    backend = _backend_from_options(model_id, d, seed)
    head = classifier.build_zeroshot_head(
        backend, list(manifest.classes),
        templates or classifier.DEFAULT_ZEROSHOT_TEMPLATES)
    classifier.save_zeroshot_head(head, output)
    click.echo(f"wrote zero-shot head to {output}")


@zeroshot.command("predict")
@click.option("--head-file", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]),
              show_default=True)
@click.option("--backend", "model_id", default="synthetic", show_default=True)
@click.option("--d", default=16, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("-o", "--output", required=True, type=click.Path())
def zeroshot_predict(head_file, manifest_path, split, model_id, d, seed, output):
    head = classifier.load_zeroshot_head(head_file)
    manifest = load_manifest(manifest_path)
    backend = _backend_from_options(model_id, d, seed)
    records = manifest.split_records(split)
    embs = np.stack([v.values for v in backend.encode_images([r.path for r in records])])
    scores = classifier.predict_matrix(head, embs)
    labels = np.array([head.class_order.index(r.label) for r in records])
    np.savez(output, scores=scores, labels=labels)
    click.echo(f"wrote scores for {len(records)} {split} images to {output}")


# --- eval ---------------------------------------------------------------------

@cli.group(invoke_without_command=True)
@click.option("--scores", "scores_path", type=click.Path(exists=True), default=None)
@click.option("--bootstrap", "resamples", default=1000, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--experiment-id", default="eval", show_default=True)
@click.option("-o", "--output-dir", type=click.Path(), default=None,
              help="Write report.json/.txt/.csv and report.png here.")
@click.pass_context
def eval(ctx, scores_path, resamples, seed, experiment_id, output_dir):
    """Bootstrap evaluation of a scores file (.npz with scores, labels)."""
    if ctx.invoked_subcommand is not None:
        return
    if scores_path is None:
        raise ConfigError("--scores is required")
    data = np.load(scores_path)
    scores, labels = data["scores"], data["labels"]
    cfg = evaluate.BootstrapConfig(resamples=resamples, seed=seed)
    k3 = min(3, scores.shape[1])
    top1 = evaluate.bootstrap_accuracy(scores, labels, cfg, k=1)
    top3 = evaluate.bootstrap_accuracy(scores, labels, cfg, k=k3)
    report = evaluate.EvalReport(
        experiment_id=experiment_id,
        rows=[evaluate.MetricRow(
            setting="full",
            top1_mean=100 * top1[0], top1_std=100 * top1[1],
            top3_mean=100 * top3[0], top3_std=100 * top3[1])],
        provenance={"bootstrap": cfg.__dict__, "scores": str(scores_path)},
    )
    click.echo(evaluate.render_report(report, "table-text"))
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            evaluate.render_report(report, "json"), encoding="utf-8")
        (out / "report.txt").write_text(
            evaluate.render_report(report, "table-text") + "\n", encoding="utf-8")
        evaluate.write_report_csv(report, out / "report.csv")
        plotting.save_report_figure(report, out / "report.png")
        click.echo(f"report written to {out}")


@eval.command("kshot")
@click.option("--seeds", default="0,1,2", show_default=True,
              help="Seed list; used to label and count the expected runs.")
@click.option("--values", required=True,
              help="Comma-separated per-seed accuracies (percent).")
def eval_kshot(seeds, values):
    """Aggregate per-seed k-shot accuracies into mean (std)."""
    seed_list = [s for s in seeds.split(",") if s]
    accs = [float(v) for v in values.split(",") if v]
    mean, std = evaluate.aggregate_kshot(accs, expected_runs=len(seed_list))
    click.echo(evaluate.format_cell(mean, std))


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc}", err=True)
        sys.exit(2)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except StageFailure as exc:
        click.echo(f"stage failure: {exc}", err=True)
        sys.exit(3)
    except GistError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    main()
