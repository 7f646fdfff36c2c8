"""Checkpointed pipeline stages over the module operations.

Each stage hashes its inputs, records completed work units in a manifest,
and writes outputs under the run directory. Re-running skips finished
stages; resuming a failed stage skips finished units. Unit granularity is
the corpus shard for recall scoring and fixed-size chunks for the LLM
stages.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import assemble as assemble_mod
from . import decontam as decontam_mod
from . import extract as extract_mod
from . import recall as recall_mod
from .checkpoint import StageContext, load_manifest
from .classifier import (
    LabeledExample,
    RecallReport,
    TextClassifier,
    score_documents,
    train,
)
from .config import PipelineConfig
from .corpus import CorpusShard, RawDocument, read_manifest, read_shard
from .errors import PipelineError
from .ioutil import atomic_write_bytes, atomic_write_text, iter_jsonl, sha256_file, sha256_json, write_jsonl
from .llmclient import build_client
from .refine import RefinedQA, assign_refiner, load_refinement_template, merge_refined, refine_pool

logger = logging.getLogger(__name__)

STAGE_ORDER = [
    "recall.r1_train",
    "recall.r1_score",
    "recall.r1_group",
    "recall.r1_triage",
    "recall.r2_trainset",
    "recall.r2_train",
    "recall.r2_score",
    "recall.r2_group",
    "recall.r2_triage",
    "recall.finalize",
    "extract.clean",
    "extract.qa",
    "refine.run",
    "refine.merge",
    "decontam.run",
    "assemble.dataset",
    "assemble.stats",
    "assemble.audit",
]

STAGE_GROUPS = {
    "recall": [s for s in STAGE_ORDER if s.startswith("recall.")],
    "extract": ["extract.clean", "extract.qa"],
    "refine": ["refine.run", "refine.merge"],
    "decontaminate": ["decontam.run"],
    "assemble": ["assemble.dataset"],
    "stats": ["assemble.stats"],
    "audit": ["assemble.audit"],
}

_FAULT_ENV = "QAMINE_FAIL_AFTER_UNITS"


def load_labeled_examples(path: Path | str) -> list[LabeledExample]:
    return [LabeledExample(text=row["text"], label=row["label"]) for row in iter_jsonl(path)]


def _chunk_ids(total: int, unit_size: int) -> list[tuple[str, int, int]]:
    units = []
    for start in range(0, total, unit_size):
        end = min(start + unit_size, total)
        units.append((f"unit-{start // unit_size:05d}", start, end))
    return units


class PipelineRunner:
    def __init__(self, config: PipelineConfig, strict_resume: bool = False):
        self.config = config
        self.strict_resume = strict_resume
        self.run_dir = Path(config.paths.output_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._shards: list[CorpusShard] | None = None
        self._units_done = 0
        self._fault_budget = int(os.environ.get(_FAULT_ENV, "0") or 0)

    # --- helpers -----------------------------------------------------------

    def path(self, rel: str) -> Path:
        return self.run_dir / rel

    def shards(self) -> list[CorpusShard]:
        if self._shards is None:
            self._shards = read_manifest(self.config.paths.corpus_manifest)
        return self._shards

    def _shard_hashes(self) -> dict[str, str]:
        hashes = {"corpus_manifest": sha256_file(self.config.paths.corpus_manifest)}
        for shard in self.shards():
            hashes[f"shard:{shard.path.name}"] = sha256_file(shard.path)
        return hashes

    def _ctx(self, stage: str, inputs: dict[str, str]) -> StageContext:
        return StageContext(self.run_dir, stage, inputs, strict_resume=self.strict_resume)

    def _tick_unit(self) -> None:
        self._units_done += 1
        if self._fault_budget and self._units_done >= self._fault_budget:
            raise PipelineError(f"fault injection: stopping after {self._units_done} units")

    def _unit_dir(self, stage: str) -> Path:
        d = self.path(f"units/{stage}")
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _client(self, endpoint):
        return build_client(endpoint, cache_dir=self.config.paths.cache_dir)

    # --- stage runner ------------------------------------------------------

    def run_stages(self, stages: Sequence[str]) -> dict[str, dict]:
        summaries: dict[str, dict] = {}
        for stage in stages:
            fn = getattr(self, "_stage_" + stage.replace(".", "_"))
            summaries[stage] = fn()
        return summaries

    def run_group(self, group: str) -> dict[str, dict]:
        if group == "run-all":
            return self.run_stages(STAGE_ORDER)
        if group not in STAGE_GROUPS:
            raise PipelineError(f"unknown stage group {group!r}")
        return self.run_stages(STAGE_GROUPS[group])

    def _guarded(self, ctx: StageContext, body: Callable[[], dict[str, str]]) -> dict:
        """Run a stage body; record failure in the manifest and re-raise."""
        if ctx.was_done:
            return {"status": "skipped", **ctx.manifest.outputs}
        try:
            outputs = body()
        except PipelineError as exc:
            ctx.fail(str(exc))
            raise
        except Exception as exc:
            ctx.fail(f"{type(exc).__name__}: {exc}")
            raise
        ctx.finish(outputs)
        return {"status": "done", **outputs}

    # --- recall stages -----------------------------------------------------

    def _recall_cfg_hash(self) -> str:
        r = self.config.recall
        return sha256_json({
            "threshold": r.threshold,
            "budget1": r.token_budget_round1,
            "budget2": r.token_budget_round2,
            "min_docs": r.min_docs,
            "per_class_cap": r.per_class_cap,
            "batch": r.triage_batch_size,
            "seed": r.seed,
            "classifier": self.config.classifier.to_dict(),
        })

    def _stage_recall_r1_train(self) -> dict:
        inputs = {
            "seed_examples": sha256_file(self.config.paths.seed_examples),
            "config": sha256_json(self.config.classifier.to_dict()),
        }
        ctx = self._ctx("recall.r1_train", inputs)

        def body() -> dict[str, str]:
            examples = load_labeled_examples(self.config.paths.seed_examples)
            model = train(examples, self.config.classifier)
            out = self.path("recall/round1_model.ftxc")
            model.save(out)
            self._tick_unit()
            return {"model": "recall/round1_model.ftxc", "examples": str(len(examples))}

        return self._guarded(ctx, body)

    def _score_stage(self, stage: str, model_rel: str, pool_rel: str, budget: float) -> dict:
        inputs = {
            "model": sha256_file(self.path(model_rel)),
            "recall_config": self._recall_cfg_hash(),
            **self._shard_hashes(),
        }
        ctx = self._ctx(stage, inputs)

        def body() -> dict[str, str]:
            model = TextClassifier.load(self.path(model_rel))
            unit_dir = self._unit_dir(stage)
            shards = self.shards()
            ctx.set_total_units(len(shards))
            unit_ids = [f"unit-{i:05d}" for i in range(len(shards))]
            for unit_id, shard in zip(unit_ids, shards):
                if ctx.unit_done(unit_id):
                    continue
                tokens_so_far = sum(
                    ctx.manifest.unit_meta.get(u, {}).get("tokens_kept", 0)
                    for u in ctx.manifest.completed_units
                )
                remaining = budget - tokens_so_far
                report = RecallReport()
                if remaining > 0:
                    kept = score_documents(
                        model, read_shard(shard), self.config.recall.threshold,
                        token_budget=remaining, report=report,
                    )
                    rows = [doc.to_dict() for doc in kept]
                else:
                    rows = []
                write_jsonl(unit_dir / f"{unit_id}.jsonl", rows)
                ctx.complete_unit(unit_id, {
                    "docs_seen": report.docs_seen,
                    "docs_kept": report.docs_kept,
                    "tokens_kept": report.tokens_kept,
                })
                self._tick_unit()
            rows = []
            for unit_id in unit_ids:
                rows.extend(iter_jsonl(unit_dir / f"{unit_id}.jsonl"))
            write_jsonl(self.path(pool_rel), rows)
            kept = sum(m.get("docs_kept", 0) for m in ctx.manifest.unit_meta.values())
            tokens = sum(m.get("tokens_kept", 0) for m in ctx.manifest.unit_meta.values())
            return {"pool": pool_rel, "docs_kept": str(kept), "tokens_kept": str(tokens)}

        return self._guarded(ctx, body)

    def _stage_recall_r1_score(self) -> dict:
        return self._score_stage(
            "recall.r1_score", "recall/round1_model.ftxc", "recall/round1_pool.jsonl",
            self.config.recall.token_budget_round1,
        )

    def _stage_recall_r2_score(self) -> dict:
        return self._score_stage(
            "recall.r2_score", "recall/round2_model.ftxc", "recall/round2_pool.jsonl",
            self.config.recall.token_budget_round2,
        )

    def _group_stage(self, stage: str, pool_rel: str, stats_rel: str, grouping_rel: str) -> dict:
        inputs = {
            "pool": sha256_file(self.path(pool_rel)),
            "min_docs": str(self.config.recall.min_docs),
        }
        ctx = self._ctx(stage, inputs)

        def body() -> dict[str, str]:
            docs = (RawDocument.from_dict(r) for r in iter_jsonl(self.path(pool_rel)))
            grouping = recall_mod.group_by_domain(docs, self.config.recall.min_docs)
            write_jsonl(self.path(stats_rel), (s.to_dict() for s in grouping.retained))
            atomic_write_text(self.path(grouping_rel), json.dumps({
                "retained_domains": len(grouping.retained),
                "dropped_domains": grouping.dropped_domains,
                "dropped_docs": grouping.dropped_docs,
                "total_docs": grouping.total_docs,
            }, indent=2))
            self._tick_unit()
            return {"stats": stats_rel, "retained_domains": str(len(grouping.retained))}

        return self._guarded(ctx, body)

    def _stage_recall_r1_group(self) -> dict:
        return self._group_stage("recall.r1_group", "recall/round1_pool.jsonl",
                                 "recall/round1_stats.jsonl", "recall/round1_grouping.json")

    def _stage_recall_r2_group(self) -> dict:
        return self._group_stage("recall.r2_group", "recall/round2_pool.jsonl",
                                 "recall/round2_stats.jsonl", "recall/round2_grouping.json")

    def _triage_stage(self, stage: str, stats_rel: str, verdicts_rel: str, judge_endpoint) -> dict:
        inputs = {
            "stats": sha256_file(self.path(stats_rel)),
            "judge": sha256_json(judge_endpoint.to_dict()),
            "batch_size": str(self.config.recall.triage_batch_size),
        }
        ctx = self._ctx(stage, inputs)

        def body() -> dict[str, str]:
            stats = [recall_mod.DomainStats.from_dict(r) for r in iter_jsonl(self.path(stats_rel))]
            judge = self._client(judge_endpoint)
            batch_size = self.config.recall.triage_batch_size
            batches = [stats[i:i + batch_size] for i in range(0, len(stats), batch_size)]
            unit_dir = self._unit_dir(stage)
            ctx.set_total_units(len(batches))
            for i, batch in enumerate(batches):
                unit_id = f"unit-{i:05d}"
                if ctx.unit_done(unit_id):
                    continue
                verdicts = recall_mod.triage_domains(judge, list(batch), batch_size)
                write_jsonl(unit_dir / f"{unit_id}.jsonl", (v.to_dict() for v in verdicts))
                ctx.complete_unit(unit_id, {"kept": sum(v.keep for v in verdicts)})
                self._tick_unit()
            rows = []
            for i in range(len(batches)):
                rows.extend(iter_jsonl(unit_dir / f"unit-{i:05d}.jsonl"))
            write_jsonl(self.path(verdicts_rel), rows)
            kept = sum(1 for r in rows if r["keep"])
            return {"verdicts": verdicts_rel, "domains": str(len(rows)), "kept": str(kept)}

        return self._guarded(ctx, body)

    def _stage_recall_r1_triage(self) -> dict:
        return self._triage_stage("recall.r1_triage", "recall/round1_stats.jsonl",
                                  "recall/round1_verdicts.jsonl", self.config.judge_round1)

    def _stage_recall_r2_triage(self) -> dict:
        return self._triage_stage("recall.r2_triage", "recall/round2_stats.jsonl",
                                  "recall/round2_verdicts.jsonl", self.config.judge_round2)

    def _stage_recall_r2_trainset(self) -> dict:
        inputs = {
            "pool": sha256_file(self.path("recall/round1_pool.jsonl")),
            "verdicts": sha256_file(self.path("recall/round1_verdicts.jsonl")),
            "recall_config": self._recall_cfg_hash(),
            **self._shard_hashes(),
        }
        ctx = self._ctx("recall.r2_trainset", inputs)

        def body() -> dict[str, str]:
            pool = [RawDocument.from_dict(r) for r in iter_jsonl(self.path("recall/round1_pool.jsonl"))]
            verdicts = [recall_mod.DomainVerdict.from_dict(r)
                        for r in iter_jsonl(self.path("recall/round1_verdicts.jsonl"))]
            kept = {v.domain for v in verdicts if v.keep}
            rejected = {v.domain for v in verdicts if not v.keep}
            general = recall_mod.sample_general_docs(
                self.shards(), self.config.recall.per_class_cap, seed=self.config.recall.seed
            )
            labels = self.config.classifier.labels
            examples = recall_mod.build_round2_trainset(
                kept, rejected, pool, general, self.config.recall.per_class_cap,
                seed=self.config.recall.seed, labels=(labels[0], labels[-1]),
            )
            write_jsonl(
                self.path("recall/round2_trainset.jsonl"),
                ({"text": e.text, "label": e.label} for e in examples),
            )
            self._tick_unit()
            return {"trainset": "recall/round2_trainset.jsonl", "examples": str(len(examples))}

        return self._guarded(ctx, body)

    def _stage_recall_r2_train(self) -> dict:
        inputs = {
            "trainset": sha256_file(self.path("recall/round2_trainset.jsonl")),
            "config": sha256_json(self.config.classifier.to_dict()),
        }
        ctx = self._ctx("recall.r2_train", inputs)

        def body() -> dict[str, str]:
            examples = load_labeled_examples(self.path("recall/round2_trainset.jsonl"))
            model = train(examples, self.config.classifier)
            model.save(self.path("recall/round2_model.ftxc"))
            self._tick_unit()
            return {"model": "recall/round2_model.ftxc"}

        return self._guarded(ctx, body)

    def _stage_recall_finalize(self) -> dict:
        inputs = {
            "pool": sha256_file(self.path("recall/round2_pool.jsonl")),
            "verdicts": sha256_file(self.path("recall/round2_verdicts.jsonl")),
        }
        ctx = self._ctx("recall.finalize", inputs)

        def body() -> dict[str, str]:
            verdicts2 = [recall_mod.DomainVerdict.from_dict(r)
                         for r in iter_jsonl(self.path("recall/round2_verdicts.jsonl"))]
            kept2 = {v.domain for v in verdicts2 if v.keep}
            rows = [
                r for r in iter_jsonl(self.path("recall/round2_pool.jsonl"))
                if recall_mod.root_domain(r["url"]) in kept2
            ]
            write_jsonl(self.path("recall/pool.jsonl"), rows)
            report = {
                "rounds": [
                    self._round_report(1, "recall.r1_score", "recall.r1_group", "recall.r1_triage"),
                    self._round_report(2, "recall.r2_score", "recall.r2_group", "recall.r2_triage"),
                ],
                "final_docs": len(rows),
            }
            atomic_write_text(self.path("recall/report.json"), json.dumps(report, indent=2))
            self._tick_unit()
            return {"pool": "recall/pool.jsonl", "docs": str(len(rows))}

        return self._guarded(ctx, body)

    def _round_report(self, round_no: int, score_stage: str, group_stage: str, triage_stage: str) -> dict:
        score = load_manifest(self.run_dir, score_stage)
        group = load_manifest(self.run_dir, group_stage)
        triage = load_manifest(self.run_dir, triage_stage)
        return recall_mod.RecallRoundReport(
            round=round_no,
            docs_recalled=int((score.outputs if score else {}).get("docs_kept", 0)),
            tokens_recalled=int((score.outputs if score else {}).get("tokens_kept", 0)),
            domains_total=int((triage.outputs if triage else {}).get("domains", 0)),
            domains_kept=int((triage.outputs if triage else {}).get("kept", 0)),
        ).to_dict()

    # --- extract stages ----------------------------------------------------

    def _stage_extract_clean(self) -> dict:
        inputs = {"pool": sha256_file(self.path("recall/pool.jsonl"))}
        ctx = self._ctx("extract.clean", inputs)

        def body() -> dict[str, str]:
            docs = [RawDocument.from_dict(r) for r in iter_jsonl(self.path("recall/pool.jsonl"))]
            unit_dir = self._unit_dir("extract.clean")
            units = _chunk_ids(len(docs), self.config.extract.unit_size)
            ctx.set_total_units(len(units))
            for unit_id, start, end in units:
                if ctx.unit_done(unit_id):
                    continue
                counters: dict = {}
                cleaned = list(extract_mod.clean_documents(docs[start:end], counters))
                write_jsonl(unit_dir / f"{unit_id}.jsonl", (c.to_dict() for c in cleaned))
                ctx.complete_unit(unit_id, counters)
                self._tick_unit()
            rows = []
            for unit_id, _, _ in units:
                rows.extend(iter_jsonl(unit_dir / f"{unit_id}.jsonl"))
            write_jsonl(self.path("extract/cleaned.jsonl"), rows)
            skipped = sum(m.get("uncleanable", 0) for m in ctx.manifest.unit_meta.values())
            return {"cleaned": "extract/cleaned.jsonl", "docs": str(len(rows)), "uncleanable": str(skipped)}

        return self._guarded(ctx, body)

    def _stage_extract_qa(self) -> dict:
        prompt_hash = (
            sha256_file(self.config.extract.prompt_template)
            if self.config.extract.prompt_template
            else "packaged-default"
        )
        inputs = {
            "cleaned": sha256_file(self.path("extract/cleaned.jsonl")),
            "endpoint": sha256_json(self.config.extract.endpoint.to_dict()),
            "prompt": prompt_hash,
        }
        ctx = self._ctx("extract.qa", inputs)

        def body() -> dict[str, str]:
            cleaned = [extract_mod.CleanDocument.from_dict(r)
                       for r in iter_jsonl(self.path("extract/cleaned.jsonl"))]
            prompt = extract_mod.load_extraction_prompt(self.config.extract.prompt_template)
            llm = self._client(self.config.extract.endpoint)
            unit_dir = self._unit_dir("extract.qa")
            units = _chunk_ids(len(cleaned), self.config.extract.unit_size)
            ctx.set_total_units(len(units))
            for unit_id, start, end in units:
                if ctx.unit_done(unit_id):
                    continue
                counters: dict = {}
                cands = extract_mod.extract_pool(llm, cleaned[start:end], prompt, counters)
                write_jsonl(unit_dir / f"{unit_id}.jsonl", (c.to_dict() for c in cands))
                counters["candidates"] = len(cands)
                ctx.complete_unit(unit_id, counters)
                self._tick_unit()
            cands = []
            for unit_id, _, _ in units:
                cands.extend(extract_mod.QACandidate.from_dict(r)
                             for r in iter_jsonl(unit_dir / f"{unit_id}.jsonl"))
            cands.sort(key=lambda c: (c.doc_id, c.ordinal))
            write_jsonl(self.path("extract/candidates.jsonl"), (c.to_dict() for c in cands))
            totals: dict[str, int] = {}
            for meta in ctx.manifest.unit_meta.values():
                for key, value in meta.items():
                    totals[key] = totals.get(key, 0) + value
            atomic_write_text(self.path("extract/report.json"),
                              json.dumps({"docs": len(cleaned), **totals}, indent=2))
            return {"candidates": "extract/candidates.jsonl", "count": str(len(cands))}

        return self._guarded(ctx, body)

    # --- refine stages -----------------------------------------------------

    def _stage_refine_run(self) -> dict:
        cfg = self.config.refine
        prompt_hash = sha256_file(cfg.prompt_template) if cfg.prompt_template else "packaged-default"
        inputs = {
            "candidates": sha256_file(self.path("extract/candidates.jsonl")),
            "endpoint_a": sha256_json(cfg.endpoint_a.to_dict()),
            "endpoint_b": sha256_json(cfg.endpoint_b.to_dict()),
            "prompt": prompt_hash,
            "split": sha256_json({"split": cfg.split, "seed": cfg.seed}),
        }
        ctx = self._ctx("refine.run", inputs)

        def body() -> dict[str, str]:
            candidates = [extract_mod.QACandidate.from_dict(r)
                          for r in iter_jsonl(self.path("extract/candidates.jsonl"))]
            template = load_refinement_template(cfg.prompt_template)
            clients = (self._client(cfg.endpoint_a), self._client(cfg.endpoint_b))
            unit_dir = self._unit_dir("refine.run")
            units = _chunk_ids(len(candidates), cfg.unit_size)
            ctx.set_total_units(len(units))
            for unit_id, start, end in units:
                if ctx.unit_done(unit_id):
                    continue
                counters: dict = {}
                stream_a, stream_b = refine_pool(
                    clients, candidates[start:end], template,
                    seed=cfg.seed, split=cfg.split, counters=counters,
                )
                rows = sorted(stream_a + stream_b, key=lambda r: r.candidate_id)
                write_jsonl(unit_dir / f"{unit_id}.jsonl", (r.to_dict() for r in rows))
                ctx.complete_unit(unit_id, counters)
                self._tick_unit()
            total = sum(len(list(iter_jsonl(unit_dir / f"{u}.jsonl"))) for u, _, _ in units)
            return {"units": str(len(units)), "refined": str(total)}

        return self._guarded(ctx, body)

    def _stage_refine_merge(self) -> dict:
        run_manifest = load_manifest(self.run_dir, "refine.run")
        if run_manifest is None:
            raise PipelineError("refine.run has not completed")
        inputs = {
            f"unit:{f.name}": sha256_file(f)
            for f in sorted(self._unit_dir("refine.run").glob("unit-*.jsonl"))
        }
        ctx = self._ctx("refine.merge", inputs)

        def body() -> dict[str, str]:
            cfg = self.config.refine
            unit_dir = self._unit_dir("refine.run")
            refined: list[RefinedQA] = []
            for unit_file in sorted(unit_dir.glob("unit-*.jsonl")):
                refined.extend(RefinedQA.from_dict(r) for r in iter_jsonl(unit_file))
            stream_a = [r for r in refined if assign_refiner(r.candidate_id, cfg.seed, cfg.split) == 0]
            stream_b = [r for r in refined if assign_refiner(r.candidate_id, cfg.seed, cfg.split) == 1]
            merged, report = merge_refined(stream_a, stream_b)
            write_jsonl(self.path("refine/refined.jsonl"), (r.to_dict() for r in merged))
            fallbacks = sum(m.get("fallbacks", 0) for m in run_manifest.unit_meta.values())
            atomic_write_text(self.path("refine/merge_report.json"),
                              json.dumps({**report.to_dict(), "fallbacks": fallbacks}, indent=2))
            self._tick_unit()
            return {"refined": "refine/refined.jsonl", "count": str(report.total)}

        return self._guarded(ctx, body)

    # --- decontamination ---------------------------------------------------

    def _benchmark_files(self) -> list[Path]:
        return sorted(self.config.paths.benchmarks_dir.glob("*.jsonl"))

    def _stage_decontam_run(self) -> dict:
        bench_files = self._benchmark_files()
        inputs = {
            "refined": sha256_file(self.path("refine/refined.jsonl")),
            "scope": self.config.decontam.scope,
            "n": str(self.config.decontam.ngram_order),
        }
        for f in bench_files:
            inputs[f"benchmark:{f.name}"] = sha256_file(f)
        if self.config.decontam.scope == "source-page":
            inputs["cleaned"] = sha256_file(self.path("extract/cleaned.jsonl"))
        ctx = self._ctx("decontam.run", inputs)

        def body() -> dict[str, str]:
            pairs = [RefinedQA.from_dict(r) for r in iter_jsonl(self.path("refine/refined.jsonl"))]
            if not bench_files:
                logger.warning("benchmark directory %s has no .jsonl files; decontamination is a pass-through",
                               self.config.paths.benchmarks_dir)
                index = decontam_mod.BenchmarkIndex(n=self.config.decontam.ngram_order)
                index.finalize()
            else:
                index = decontam_mod.build_index(bench_files, n=self.config.decontam.ngram_order)
            source_texts = None
            if self.config.decontam.scope == "source-page":
                source_texts = {
                    r["doc_id"]: r["text"] for r in iter_jsonl(self.path("extract/cleaned.jsonl"))
                }
            kept, report = decontam_mod.filter_contaminated(
                index, pairs, scope=self.config.decontam.scope, source_texts=source_texts,
            )
            unique, duplicates = decontam_mod.dedup(kept)
            write_jsonl(self.path("decontam/kept.jsonl"), (r.to_dict() for r in unique))
            atomic_write_text(self.path("decontam/report.json"), json.dumps({
                **report.to_dict(),
                "duplicates_removed": duplicates,
                "kept": len(unique),
                "benchmark_entries": index.source_counts,
            }, indent=2))
            self._tick_unit()
            return {"kept": "decontam/kept.jsonl", "count": str(len(unique)),
                    "dropped": str(report.dropped), "duplicates": str(duplicates)}

        return self._guarded(ctx, body)

    # --- assembly ----------------------------------------------------------

    def _stage_assemble_dataset(self) -> dict:
        cfg = self.config.assemble
        inputs = {
            "kept": sha256_file(self.path("decontam/kept.jsonl")),
            "label_subjects": str(cfg.label_subjects),
        }
        if cfg.label_subjects and cfg.subject_endpoint is not None:
            inputs["subject_endpoint"] = sha256_json(cfg.subject_endpoint.to_dict())
        ctx = self._ctx("assemble.dataset", inputs)

        def body() -> dict[str, str]:
            pairs = [RefinedQA.from_dict(r) for r in iter_jsonl(self.path("decontam/kept.jsonl"))]
            labeler = self._client(cfg.subject_endpoint) if cfg.label_subjects else None
            counters: dict = {}
            records = []
            for pair in pairs:
                subject = assemble_mod.label_subject(labeler, pair, counters) if labeler else None
                records.append(assemble_mod.to_sft(pair, subject=subject))
            write_jsonl(self.path("assemble/dataset.jsonl"), (r.to_dict() for r in records))
            self._tick_unit()
            return {"dataset": "assemble/dataset.jsonl", "records": str(len(records))}

        return self._guarded(ctx, body)

    def _stage_assemble_stats(self) -> dict:
        inputs = {"dataset": sha256_file(self.path("assemble/dataset.jsonl"))}
        ctx = self._ctx("assemble.stats", inputs)

        def body() -> dict[str, str]:
            records = (assemble_mod.SftRecord.from_dict(r)
                       for r in iter_jsonl(self.path("assemble/dataset.jsonl")))
            stats = assemble_mod.compute_stats(records)
            atomic_write_text(self.path("assemble/stats.json"),
                              json.dumps(stats.to_dict(self.config.assemble.top_domains), indent=2))
            atomic_write_text(self.path("assemble/stats.txt"),
                              stats.format_table(self.config.assemble.top_domains))
            self._tick_unit()
            return {"stats": "assemble/stats.json", "pairs": str(stats.pair_count)}

        return self._guarded(ctx, body)

    def _stage_assemble_audit(self) -> dict:
        cfg = self.config.assemble
        inputs = {
            "kept": sha256_file(self.path("decontam/kept.jsonl")),
            "candidates": sha256_file(self.path("extract/candidates.jsonl")),
            "audit": sha256_json({"n": cfg.audit_n, "seed": cfg.audit_seed}),
        }
        ctx = self._ctx("assemble.audit", inputs)

        def body() -> dict[str, str]:
            candidates = {
                r["candidate_id"]: extract_mod.QACandidate.from_dict(r)
                for r in iter_jsonl(self.path("extract/candidates.jsonl"))
            }
            refined = [RefinedQA.from_dict(r) for r in iter_jsonl(self.path("decontam/kept.jsonl"))]
            sample = assemble_mod.sample_audit(candidates, refined, n=cfg.audit_n, seed=cfg.audit_seed)
            atomic_write_bytes(self.path("assemble/audit.csv"), sample.to_csv().encode("utf-8"))
            self._tick_unit()
            return {"audit": "assemble/audit.csv", "rows": str(sample.size)}

        return self._guarded(ctx, body)
