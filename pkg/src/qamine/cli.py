"""Operator entry point: stage subcommands over one TOML config.

Prints a single machine-readable JSON summary line per command on stdout,
logs to stderr. Exit codes: 0 success, 1 stage failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import recall as recall_mod
from .checkpoint import RunLock, StageContext, load_manifest
from .classifier import TextClassifier, train
from .config import PipelineConfig, load_config
from .errors import ConfigError, PipelineError, StaleCheckpointError
from .ioutil import iter_jsonl, sha256_file, sha256_json, write_jsonl
from .llmclient import build_client
from .pipeline import STAGE_GROUPS, STAGE_ORDER, PipelineRunner, load_labeled_examples

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2

PIPELINE_COMMANDS = ("recall", "extract", "refine", "decontaminate", "assemble", "stats", "audit")


def _summary(payload: dict) -> None:
    print(json.dumps(payload, ensure_ascii=False, sort_keys=True))
    sys.stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qamine", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline TOML config")
        return p

    p = add("train-classifier", "train a recall classifier from labeled examples")
    p.add_argument("--examples", help="labeled JSONL (defaults to paths.seed_examples)")
    p.add_argument("--model-out", help="output model path (defaults under output_dir)")

    add("recall", "two-round recall: train, score, group, triage, retrain, finalize")

    p = add("triage", "run LLM domain triage over a domain-stats JSONL file")
    p.add_argument("--domain-stats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--round", type=int, choices=(1, 2), default=1, help="which judge endpoint to use")

    add("extract", "clean recalled pages and extract Q-A candidates")
    add("refine", "refine candidates with the two endpoints and merge")
    add("decontaminate", "drop benchmark-contaminated pairs and dedup")
    add("assemble", "convert kept pairs to the SFT dataset")
    add("stats", "compute dataset statistics")
    add("audit", "emit the seeded audit sample CSV")

    p = add("run-all", "run every stage in order")
    p.add_argument("--abort-after", metavar="STAGE",
                   help="testing aid: exit 1 after the named stage completes")

    p = add("resume", "continue an interrupted stage group")
    p.add_argument("stage", choices=list(PIPELINE_COMMANDS) + ["run-all"])
    return parser


def _load_config_or_exit(path: str) -> PipelineConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG_ERROR)


def _cmd_train_classifier(args, config: PipelineConfig) -> dict:
    examples_path = Path(args.examples) if args.examples else config.paths.seed_examples
    model_out = Path(args.model_out) if args.model_out else config.paths.output_dir / "models/classifier.ftxc"
    inputs = {
        "examples": sha256_file(examples_path),
        "config": sha256_json(config.classifier.to_dict()),
    }
    ctx = StageContext(config.paths.output_dir, "train_classifier", inputs)
    if ctx.was_done and Path(ctx.manifest.outputs.get("model", "")) == model_out and model_out.exists():
        return {"command": "train-classifier", "status": "skipped", "model": str(model_out)}
    try:
        examples = load_labeled_examples(examples_path)
        model = train(examples, config.classifier)
        model.save(model_out)
    except Exception as exc:
        ctx.fail(str(exc))
        raise
    ctx.finish({"model": str(model_out)})
    return {
        "command": "train-classifier",
        "status": "done",
        "model": str(model_out),
        "examples": len(examples),
        "vocab": len(model.vocab),
    }


def _cmd_triage(args, config: PipelineConfig) -> dict:
    stats = [recall_mod.DomainStats.from_dict(r) for r in iter_jsonl(args.domain_stats)]
    endpoint = config.judge_round1 if args.round == 1 else config.judge_round2
    judge = build_client(endpoint, cache_dir=config.paths.cache_dir)
    verdicts = recall_mod.triage_domains(judge, stats, config.recall.triage_batch_size)
    write_jsonl(args.out, (v.to_dict() for v in verdicts))
    kept = sum(1 for v in verdicts if v.keep)
    return {
        "command": "triage",
        "status": "done",
        "domains": len(verdicts),
        "kept": kept,
        "out": str(args.out),
    }


def _run_pipeline_stages(config: PipelineConfig, stages: list[str],
                         strict_resume: bool = False, abort_after: str | None = None) -> dict:
    runner = PipelineRunner(config, strict_resume=strict_resume)
    summaries: dict[str, dict] = {}
    for stage in stages:
        summaries.update(runner.run_stages([stage]))
        if abort_after is not None and stage == abort_after:
            _summary({"command": "run-all", "status": "aborted", "aborted_after": stage,
                      "stages": summaries})
            raise SystemExit(EXIT_STAGE_FAILURE)
    return summaries


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    config = _load_config_or_exit(args.config)

    command = args.command
    try:
        with RunLock(config.paths.output_dir):
            if command == "train-classifier":
                result = _cmd_train_classifier(args, config)
            elif command == "triage":
                result = _cmd_triage(args, config)
            elif command in PIPELINE_COMMANDS:
                stages = STAGE_GROUPS[{"decontaminate": "decontaminate"}.get(command, command)]
                summaries = _run_pipeline_stages(config, stages)
                result = {"command": command, "status": "done", "stages": summaries}
            elif command == "run-all":
                abort_after = getattr(args, "abort_after", None)
                if abort_after is not None and abort_after not in STAGE_ORDER:
                    print(f"config error: unknown stage {abort_after!r}", file=sys.stderr)
                    return EXIT_CONFIG_ERROR
                summaries = _run_pipeline_stages(config, STAGE_ORDER, abort_after=abort_after)
                result = {"command": "run-all", "status": "done", "stages": summaries}
            elif command == "resume":
                if args.stage == "run-all":
                    stages = STAGE_ORDER
                else:
                    stages = STAGE_GROUPS[args.stage]
                summaries = _run_pipeline_stages(config, stages, strict_resume=True)
                result = {"command": "resume", "status": "done", "stages": summaries}
            else:  # pragma: no cover
                raise PipelineError(f"unhandled command {command}")
    except StaleCheckpointError as exc:
        print(f"refusing to resume: {exc}", file=sys.stderr)
        _summary({"command": command, "status": "stale-checkpoint", "error": str(exc)})
        return EXIT_STAGE_FAILURE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except SystemExit:
        raise
    except PipelineError as exc:
        logger.error("stage failed: %s", exc)
        _summary({"command": command, "status": "failed", "error": str(exc)})
        return EXIT_STAGE_FAILURE
    except Exception as exc:  # unexpected; still leave a resumable manifest behind
        logger.exception("unexpected failure")
        _summary({"command": command, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        return EXIT_STAGE_FAILURE

    _summary(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
