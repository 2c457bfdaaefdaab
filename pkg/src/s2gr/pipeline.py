"""Stage implementations behind the CLI subcommands.

Every stage reads its inputs from files, writes its artifacts plus a
manifest into the work directory, and is deterministic under the configured
seed. Artifact names are fixed so each stage can name the producing command
of anything it finds missing.
"""

from __future__ import annotations

import copy
import shutil
import statistics
from pathlib import Path

import numpy as np
import torch

from . import coocgraph, corpus, evalkit, inference, semantics, tokenizer as tok
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, MissingArtifactError
from .manifest import file_digest, load_manifest, manifest_path, require_artifact, write_manifest
from .model import ModelConfig, S2GRModel, load_model, save_model, train as train_model_loop

ARTIFACTS = {
    "interactions": "interactions.tsv",
    "embeddings": "embeddings.emb",
    "hierarchy": "hierarchy.tsv",
    "item_map": "item_map.tsv",
    "user_map": "user_map.tsv",
    "graph": "graph.tsv",
    "aligned": "aligned.emb",
    "tokenizer": "tokenizer.ckpt",
    "sid_table": "sid_table.tsv",
    "sid_metrics": "sid_metrics.txt",
    "centroids": "centroids",
    "model": "model.ckpt",
    "train_log": "train_log.tsv",
    "rankings": "rankings.tsv",
    "report": "report.txt",
    "report_tsv": "report.tsv",
}


def artifact(cfg: RunConfig, name: str) -> Path:
    return cfg.workdir / ARTIFACTS[name]


def _interactions_path(cfg: RunConfig) -> Path:
    if cfg.paths.interactions:
        path = Path(cfg.paths.interactions)
        if not path.exists():
            raise ConfigError(f"paths.interactions does not exist: {path}")
        return path
    return require_artifact(artifact(cfg, "interactions"), "synth")


def _embeddings_path(cfg: RunConfig) -> Path:
    if cfg.paths.embeddings:
        path = Path(cfg.paths.embeddings)
        if not path.exists():
            raise ConfigError(f"paths.embeddings does not exist: {path}")
        return path
    return require_artifact(artifact(cfg, "embeddings"), "synth")


def load_log(cfg: RunConfig) -> corpus.InteractionLog:
    """Load interactions with the persisted id maps (creating them once)."""
    path = _interactions_path(cfg)
    item_map_path = artifact(cfg, "item_map")
    user_map_path = artifact(cfg, "user_map")
    if item_map_path.exists() and user_map_path.exists():
        return corpus.load_interactions(
            path,
            user_map=corpus.load_id_map(user_map_path),
            item_map=corpus.load_id_map(item_map_path),
        )
    log = corpus.load_interactions(path)
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    corpus.write_id_map(user_map_path, log.user_map)
    corpus.write_id_map(item_map_path, log.item_map)
    return log


def stage_synth(cfg: RunConfig) -> None:
    """Generate the synthetic corpus with planted hierarchy into the workdir."""
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    log, emb, hierarchy = corpus.generate_synthetic(cfg.synthetic)
    interactions = artifact(cfg, "interactions")
    corpus.write_interactions(interactions, log)
    corpus.write_id_map(artifact(cfg, "user_map"), log.user_map)
    corpus.write_id_map(artifact(cfg, "item_map"), log.item_map)
    embeddings = artifact(cfg, "embeddings")
    corpus.write_embeddings(embeddings, emb.X)
    corpus.write_hierarchy(artifact(cfg, "hierarchy"), hierarchy)
    write_manifest(interactions, "synth", cfg.config_hash(), cfg.synthetic.seed, {},
                   extra={"includes_heldout_rows": True, "n_items": emb.n_items})
    write_manifest(embeddings, "synth", cfg.config_hash(), cfg.synthetic.seed,
                   {"interactions": interactions}, extra={"source": "synthetic"})


def stage_build_graph(cfg: RunConfig, allow_leakage: bool = False) -> None:
    """Build the co-occurrence graph and the smoothed embeddings."""
    log = load_log(cfg)
    interactions = _interactions_path(cfg)
    if cfg.graph.source_split == "full":
        flagged = False
        try:
            flagged = bool(load_manifest(interactions).get("includes_heldout_rows"))
        except MissingArtifactError:
            flagged = True  # unknown provenance: assume held-out rows present
        if flagged and not allow_leakage:
            raise ConfigError(
                "graph.source_split=full would leak held-out rows into the graph; "
                "pass --allow-leakage to proceed")
        sequences = log.sequences()
    else:
        sequences = corpus.train_sequences(log)
    graph = coocgraph.build_cooc_graph(sequences, n_items=log.n_items, window=cfg.graph.window)
    graph_path = artifact(cfg, "graph")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    coocgraph.write_graph(graph_path, graph)

    emb = corpus.load_item_embeddings(_embeddings_path(cfg), expected_n=log.n_items)
    pcfg = coocgraph.PropagationConfig(alpha=cfg.graph.alpha, hops=cfg.graph.hops)
    h_align = coocgraph.smooth_embeddings(emb.X, graph, pcfg)
    aligned_path = artifact(cfg, "aligned")
    corpus.write_embeddings(aligned_path, h_align)
    write_manifest(graph_path, "build-graph", cfg.config_hash(), cfg.run.seed,
                   {"interactions": interactions},
                   extra={"window": cfg.graph.window, "source_split": cfg.graph.source_split})
    write_manifest(aligned_path, "build-graph", cfg.config_hash(), cfg.run.seed,
                   {"graph": graph_path, "embeddings": _embeddings_path(cfg)},
                   extra={"alpha": cfg.graph.alpha, "hops": cfg.graph.hops})


def _tokenizer_input(cfg: RunConfig) -> tuple[np.ndarray, Path, str]:
    if cfg.tokenizer.input_source == "aligned":
        path = require_artifact(artifact(cfg, "aligned"), "build-graph")
        return corpus.load_item_embeddings(path).X, path, "aligned"
    path = _embeddings_path(cfg)
    return corpus.load_item_embeddings(path).X, path, "raw"


def _quantizer_config(cfg: RunConfig) -> tok.QuantizerConfig:
    qcfg = replace_stage_config(cfg.tokenizer)
    if cfg.tokenizer.method == "rqvae":
        qcfg.balance = False
        qcfg.uniformity_weight = 0.0
    return qcfg


def replace_stage_config(stage_cfg) -> tok.QuantizerConfig:
    """Down-cast the CLI tokenizer section to the bare quantizer config."""
    base_fields = tok.QuantizerConfig.__dataclass_fields__
    return tok.QuantizerConfig(**{k: getattr(stage_cfg, k) for k in base_fields})


def stage_train_tokenizer(cfg: RunConfig, log_fn=None) -> None:
    x, input_path, input_tag = _tokenizer_input(cfg)
    ckpt_path = artifact(cfg, "tokenizer")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    if cfg.tokenizer.method == "rqkmeans":
        table = tok.rq_kmeans(x, cfg.tokenizer.levels, cfg.tokenizer.codebook_size,
                              cfg.tokenizer.seed)
        tensors = {f"codebook_{level}": torch.as_tensor(cb, dtype=torch.float32)
                   for level, cb in enumerate(table.codebooks)}
        save_checkpoint(ckpt_path, tensors)
    else:
        qcfg = _quantizer_config(cfg)
        model = tok.train_tokenizer(x, qcfg, log_fn=log_fn)
        tok.save_tokenizer(ckpt_path, model)
    write_manifest(ckpt_path, "train-tokenizer", cfg.config_hash(), cfg.tokenizer.seed,
                   {"input": input_path},
                   extra={"method": cfg.tokenizer.method, "input_source": input_tag,
                          "levels": cfg.tokenizer.levels,
                          "codebook_size": cfg.tokenizer.codebook_size})


def load_codebooks(cfg: RunConfig) -> list[np.ndarray]:
    ckpt_path = require_artifact(artifact(cfg, "tokenizer"), "train-tokenizer")
    tensors = load_checkpoint(ckpt_path)
    if cfg.tokenizer.method == "rqkmeans":
        return [tensors[f"codebook_{level}"].numpy().astype(np.float64)
                for level in range(cfg.tokenizer.levels)]
    codebooks = tensors["codebooks"]
    return [codebooks[level].numpy().astype(np.float64)
            for level in range(cfg.tokenizer.levels)]


def stage_assign_sids(cfg: RunConfig) -> None:
    x, input_path, _ = _tokenizer_input(cfg)
    if cfg.tokenizer.method == "rqkmeans":
        require_artifact(artifact(cfg, "tokenizer"), "train-tokenizer")
        table = tok.rq_kmeans(x, cfg.tokenizer.levels, cfg.tokenizer.codebook_size,
                              cfg.tokenizer.seed)
    else:
        ckpt_path = require_artifact(artifact(cfg, "tokenizer"), "train-tokenizer")
        model = tok.load_tokenizer(ckpt_path, _quantizer_config(cfg))
        table = tok.assign_sids(model, x)
    table_path = artifact(cfg, "sid_table")
    tok.write_sid_table(table_path, table)
    cur, icr = tok.compute_cur_icr(table, table.levels, table.codebook_size)
    with open(artifact(cfg, "sid_metrics"), "w", encoding="utf-8") as fh:
        fh.write(f"items: {table.n_items}\n")
        fh.write(f"distinct sids: {len(table.reverse)}\n")
        fh.write(f"codebook utilization rate: {cur * 100:.4f}%\n")
        fh.write(f"independent coding rate: {icr * 100:.4f}%\n")
        fh.write(f"CUR={cur:.10g}\n")
        fh.write(f"ICR={icr:.10g}\n")
    write_manifest(table_path, "assign-sids", cfg.config_hash(), cfg.tokenizer.seed,
                   {"input": input_path, "tokenizer": artifact(cfg, "tokenizer")},
                   extra={"levels": cfg.tokenizer.levels,
                          "codebook_size": cfg.tokenizer.codebook_size,
                          "cur": cur, "icr": icr})


def stage_cluster_codebooks(cfg: RunConfig) -> None:
    codebooks = load_codebooks(cfg)
    cset = semantics.build_centroid_set(codebooks, cfg.semantics.n_clusters, cfg.run.seed)
    cdir = artifact(cfg, "centroids")
    semantics.write_centroid_set(cdir, cset)
    write_manifest(cdir / "cluster_map.tsv", "cluster-codebooks", cfg.config_hash(),
                   cfg.run.seed, {"tokenizer": artifact(cfg, "tokenizer")},
                   extra={"n_clusters": cfg.semantics.n_clusters,
                          "levels": cfg.tokenizer.levels,
                          "codebook_size": cfg.tokenizer.codebook_size})


def _model_config(cfg: RunConfig) -> ModelConfig:
    base_fields = ModelConfig.__dataclass_fields__
    return ModelConfig(**{k: getattr(cfg.model, k) for k in base_fields})


def stage_train_model(cfg: RunConfig, log_fn=None) -> None:
    table_path = require_artifact(artifact(cfg, "sid_table"), "assign-sids")
    table = tok.load_sid_table(table_path, cfg.tokenizer.codebook_size)
    mcfg = _model_config(cfg)
    think_supervision = not (mcfg.no_reason or mcfg.no_think_loss)
    cset = None
    if think_supervision:
        cdir = artifact(cfg, "centroids")
        require_artifact(cdir / "cluster_map.tsv", "cluster-codebooks")
        cset = semantics.load_centroid_set(cdir)
    log = load_log(cfg)
    split = corpus.chronological_split(log, cfg.corpus.min_test_len)

    from .numerics import seed_everything

    seed_everything(mcfg.seed)
    model = S2GRModel(mcfg)
    quantizer_codebooks = None
    if mcfg.target_embedding_source == "quantizer":
        quantizer_codebooks = [torch.as_tensor(cb, dtype=torch.float32)
                               for cb in load_codebooks(cfg)]
    lines = train_model_loop(model, split.train, table, cset, mcfg,
                             valid=split.valid, log_fn=log_fn,
                             quantizer_codebooks=quantizer_codebooks)
    model_path = artifact(cfg, "model")
    save_model(model_path, model)
    log_path = artifact(cfg, "train_log")
    log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(model_path, "train-model", cfg.config_hash(), mcfg.seed,
                   {"sid_table": table_path, "interactions": _interactions_path(cfg)},
                   extra={"levels": mcfg.levels, "codebook_size": mcfg.codebook_size,
                          "no_reason": mcfg.no_reason, "no_think_loss": mcfg.no_think_loss})


def _beam_width(cfg: RunConfig) -> int:
    if cfg.inference.beam_width > 0:
        return cfg.inference.beam_width
    return 2 * max(cfg.eval.cutoffs)


def stage_infer(cfg: RunConfig) -> None:
    table_path = require_artifact(artifact(cfg, "sid_table"), "assign-sids")
    model_path = require_artifact(artifact(cfg, "model"), "train-model")
    table = tok.load_sid_table(table_path, cfg.tokenizer.codebook_size)
    model = load_model(model_path, _model_config(cfg))
    log = load_log(cfg)
    split = corpus.chronological_split(log, cfg.corpus.min_test_len)
    width = _beam_width(cfg)
    k_max = max(cfg.eval.cutoffs)
    trie = inference.PrefixTrie.from_table(table) if cfg.inference.constrain else None

    rankings: dict[int, list[tuple[int, float]]] = {}
    users = sorted(split.test)
    codes = table.codes
    for start in range(0, len(users), cfg.inference.user_batch):
        chunk = users[start: start + cfg.inference.user_batch]
        histories = [[tuple(int(c) for c in codes[i]) for i in split.test[u][0]]
                     for u in chunk]
        beam_lists = inference.beam_search_batch(model, histories, width,
                                                 cfg.inference.constrain, trie)
        for user, beams in zip(chunk, beam_lists):
            rankings[user] = inference.resolve_items(beams, table, k_max)
    rankings_path = artifact(cfg, "rankings")
    inference.write_rankings(rankings_path, rankings)
    write_manifest(rankings_path, "infer", cfg.config_hash(), cfg.run.seed,
                   {"model": model_path, "sid_table": table_path},
                   extra={"beam_width": width, "constrain": cfg.inference.constrain})


def stage_evaluate(cfg: RunConfig) -> evalkit.MetricReport:
    rankings_path = require_artifact(artifact(cfg, "rankings"), "infer")
    table_manifest = load_manifest(artifact(cfg, "sid_table"))
    model_manifest = load_manifest(artifact(cfg, "model"))
    for key in ("levels", "codebook_size"):
        if table_manifest.get(key) != model_manifest.get(key):
            raise ConfigError(
                f"lineage mismatch: sid_table {key}={table_manifest.get(key)} "
                f"vs model {key}={model_manifest.get(key)}")

    log = load_log(cfg)
    split = corpus.chronological_split(log, cfg.corpus.min_test_len)
    rankings = inference.load_rankings(rankings_path)
    users = sorted(split.test)
    ranked_items = [[item for item, _ in rankings.get(u, [])] for u in users]
    targets = [split.test[u][1] for u in users]
    cutoffs = list(cfg.eval.cutoffs)
    report = evalkit.evaluate_rankings(ranked_items, targets, cutoffs)
    if cfg.eval.length_buckets:
        lengths = [len(split.test[u][0]) for u in users]
        report.buckets = evalkit.bucket_by_length(
            ranked_items, targets, lengths, list(cfg.eval.length_buckets), cutoffs)
    evalkit.write_report(artifact(cfg, "report"), report)
    with open(artifact(cfg, "report_tsv"), "w", encoding="utf-8") as fh:
        fh.write("metric\tvalue\n")
        for k in cutoffs:
            fh.write(f"hr@{k}\t{report.hr[k]:.6f}\n")
            fh.write(f"ndcg@{k}\t{report.ndcg[k]:.6f}\n")
    write_manifest(artifact(cfg, "report"), "evaluate", cfg.config_hash(), cfg.run.seed,
                   {"rankings": rankings_path}, extra={"cutoffs": cutoffs})
    return report


PIPELINE_ORDER = (
    "build-graph", "train-tokenizer", "assign-sids", "cluster-codebooks",
    "train-model", "infer", "evaluate",
)


def stage_all(cfg: RunConfig, allow_leakage: bool = False, log_fn=None) -> evalkit.MetricReport:
    stage_build_graph(cfg, allow_leakage=allow_leakage)
    stage_train_tokenizer(cfg, log_fn=None)
    stage_assign_sids(cfg)
    stage_cluster_codebooks(cfg)
    stage_train_model(cfg, log_fn=log_fn)
    stage_infer(cfg)
    return stage_evaluate(cfg)


ABLATION_VARIANTS = ("full", "wo_coba", "wo_reason", "wo_think_loss")


def _variant_config(base: RunConfig, variant: str, seed: int, workdir: Path) -> RunConfig:
    cfg = copy.deepcopy(base)
    cfg.paths.workdir = str(workdir)
    # variants share the base corpus files, whatever produced them
    cfg.paths.interactions = str(_interactions_path(base))
    cfg.paths.embeddings = str(_embeddings_path(base))
    cfg.run.seed = seed
    cfg.tokenizer.seed = seed
    cfg.model.seed = seed
    if variant == "wo_coba":
        cfg.tokenizer.input_source = "raw"
        cfg.tokenizer.balance = False
        cfg.tokenizer.uniformity_weight = 0.0
    elif variant == "wo_reason":
        cfg.model.no_reason = True
    elif variant == "wo_think_loss":
        cfg.model.no_think_loss = True
    elif variant != "full":
        raise ConfigError(f"unknown ablation variant {variant}")
    cfg.validate()
    return cfg


_TOKENIZER_ARTIFACTS = ("tokenizer", "sid_table", "sid_metrics")


def _copy_tokenizer_artifacts(src: RunConfig, dst: RunConfig) -> None:
    dst.workdir.mkdir(parents=True, exist_ok=True)
    for name in _TOKENIZER_ARTIFACTS:
        src_path = artifact(src, name)
        shutil.copy2(src_path, artifact(dst, name))
        if manifest_path(src_path).exists():
            shutil.copy2(manifest_path(src_path), manifest_path(artifact(dst, name)))
    src_cdir = artifact(src, "centroids")
    dst_cdir = artifact(dst, "centroids")
    if dst_cdir.exists():
        shutil.rmtree(dst_cdir)
    shutil.copytree(src_cdir, dst_cdir)


def run_ablation(base: RunConfig, log_fn=None) -> dict[str, evalkit.MetricReport]:
    """Train and evaluate all ablation variants over the configured seed set.

    The corpus and splits are shared; variants differing only in the sequence
    model reuse the same tokenizer artifacts per seed. Reports the per-variant
    median (by HR at the largest cutoff) across seeds.
    """
    seeds = list(base.eval.ablation_seeds)
    if not seeds:
        raise ConfigError("eval.ablation_seeds must be nonempty for ablate")
    root = base.workdir / "ablation"
    per_variant: dict[str, list[evalkit.MetricReport]] = {v: [] for v in ABLATION_VARIANTS}
    for seed in seeds:
        shared: dict[str, RunConfig] = {}
        for variant in ABLATION_VARIANTS:
            vcfg = _variant_config(base, variant, seed, root / f"seed{seed}" / variant)
            # tokenizer settings are identical for every non-CoBa-ablated variant
            group = "raw" if variant == "wo_coba" else "aligned"
            if group in shared:
                _copy_tokenizer_artifacts(shared[group], vcfg)
            else:
                if vcfg.tokenizer.input_source == "aligned":
                    stage_build_graph(vcfg)
                stage_train_tokenizer(vcfg)
                stage_assign_sids(vcfg)
                stage_cluster_codebooks(vcfg)
                shared[group] = vcfg
            stage_train_model(vcfg)
            stage_infer(vcfg)
            report = stage_evaluate(vcfg)
            per_variant[variant].append(report)
            if log_fn is not None:
                k = max(base.eval.cutoffs)
                log_fn(f"seed={seed} variant={variant} HR@{k}={report.hr[k]:.4f}")

    cutoffs = list(base.eval.cutoffs)
    k_top = max(cutoffs)
    medians: dict[str, evalkit.MetricReport] = {}
    for variant, reports in per_variant.items():
        medians[variant] = evalkit.MetricReport(
            cutoffs=cutoffs,
            hr={k: statistics.median(r.hr[k] for r in reports) for k in cutoffs},
            ndcg={k: statistics.median(r.ndcg[k] for r in reports) for k in cutoffs},
            n_samples=reports[0].n_samples,
        )
    root.mkdir(parents=True, exist_ok=True)
    table_text = evalkit.format_ablation_table(medians, cutoffs)
    (root / "table.txt").write_text(table_text + "\n", encoding="utf-8")
    evalkit.write_ablation_tsv(root / "table.tsv", medians, cutoffs)
    with open(root / "per_seed.tsv", "w", encoding="utf-8") as fh:
        fh.write("seed\tvariant\t" + "\t".join(
            [f"hr@{k}" for k in cutoffs] + [f"ndcg@{k}" for k in cutoffs]) + "\n")
        for variant, reports in per_variant.items():
            for seed, report in zip(seeds, reports):
                cells = [str(seed), variant] \
                    + [f"{report.hr[k]:.6f}" for k in cutoffs] \
                    + [f"{report.ndcg[k]:.6f}" for k in cutoffs]
                fh.write("\t".join(cells) + "\n")
    if log_fn is not None:
        log_fn("\n" + table_text)
    return medians
