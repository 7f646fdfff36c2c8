"""Pipeline configuration: one TOML file, validated with field-path errors.

Relative paths (including mock:// endpoint scripts) resolve against the
directory containing the config file, so a fixture tree is relocatable.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .classifier import ClassifierConfig, ConfigurationError
from .errors import ConfigError
from .llmclient import LlmEndpoint
from .recall import RecallConfig


@dataclass
class PathsConfig:
    corpus_manifest: Path
    seed_examples: Path
    benchmarks_dir: Path
    output_dir: Path
    cache_dir: Path | None = None


@dataclass
class ExtractConfig:
    endpoint: LlmEndpoint
    prompt_template: Path | None = None
    unit_size: int = 64
    keep_cleaned: bool = True


@dataclass
class RefineConfig:
    endpoint_a: LlmEndpoint
    endpoint_b: LlmEndpoint
    prompt_template: Path | None = None
    split: float = 0.5
    seed: int = 7
    unit_size: int = 64


@dataclass
class DecontamConfig:
    ngram_order: int = 10
    scope: str = "source-page"


@dataclass
class AssembleConfig:
    label_subjects: bool = False
    subject_endpoint: LlmEndpoint | None = None
    audit_n: int = 50
    audit_seed: int = 13
    top_domains: int = 20


@dataclass
class PipelineConfig:
    paths: PathsConfig
    classifier: ClassifierConfig
    recall: RecallConfig
    judge_round1: LlmEndpoint
    judge_round2: LlmEndpoint
    extract: ExtractConfig
    refine: RefineConfig
    decontam: DecontamConfig = field(default_factory=DecontamConfig)
    assemble: AssembleConfig = field(default_factory=AssembleConfig)


def _section(data: dict, name: str) -> dict:
    value = data.get(name)
    if value is None:
        raise ConfigError(f"{name}: missing required section")
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: must be a table")
    return dict(value)


def _endpoint(table: dict, path: str, base_dir: Path) -> LlmEndpoint:
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: must be a table")
    table = dict(table)
    base_url = table.get("base_url")
    if isinstance(base_url, str) and base_url.startswith("mock://"):
        script = base_url[len("mock://"):]
        if not Path(script).is_absolute():
            table["base_url"] = "mock://" + str(base_dir / script)
    try:
        return LlmEndpoint(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _resolve(base_dir: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base_dir / p


def load_config(path: Path | str) -> PipelineConfig:
    path = Path(path)
    base_dir = path.parent.resolve()
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return parse_config(data, base_dir)


def parse_config(data: dict, base_dir: Path) -> PipelineConfig:
    paths_tbl = _section(data, "paths")
    for key in ("corpus_manifest", "seed_examples", "benchmarks_dir", "output_dir"):
        if key not in paths_tbl:
            raise ConfigError(f"paths.{key}: missing required path")
    paths = PathsConfig(
        corpus_manifest=_resolve(base_dir, paths_tbl["corpus_manifest"]),
        seed_examples=_resolve(base_dir, paths_tbl["seed_examples"]),
        benchmarks_dir=_resolve(base_dir, paths_tbl["benchmarks_dir"]),
        output_dir=_resolve(base_dir, paths_tbl["output_dir"]),
        cache_dir=_resolve(base_dir, paths_tbl["cache_dir"]) if paths_tbl.get("cache_dir") else None,
    )

    cls_tbl = data.get("classifier", {})
    try:
        classifier = ClassifierConfig(**{**cls_tbl, "labels": tuple(cls_tbl.get("labels", ("negative", "positive")))})
    except (TypeError, ConfigurationError) as exc:
        raise ConfigError(f"classifier: {exc}") from exc

    recall_tbl = _section(data, "recall")
    judge1_tbl = recall_tbl.pop("judge_round1", None)
    judge2_tbl = recall_tbl.pop("judge_round2", None)
    if judge1_tbl is None or judge2_tbl is None:
        raise ConfigError("recall.judge_round1 / recall.judge_round2: both judge endpoints are required")
    judge_round1 = _endpoint(judge1_tbl, "recall.judge_round1", base_dir)
    judge_round2 = _endpoint(judge2_tbl, "recall.judge_round2", base_dir)
    try:
        recall = RecallConfig(**recall_tbl)
    except TypeError as exc:
        raise ConfigError(f"recall: {exc}") from exc

    extract_tbl = _section(data, "extract")
    extract = ExtractConfig(
        endpoint=_endpoint(extract_tbl.get("endpoint"), "extract.endpoint", base_dir),
        prompt_template=_resolve(base_dir, extract_tbl["prompt_template"]) if extract_tbl.get("prompt_template") else None,
        unit_size=extract_tbl.get("unit_size", 64),
        keep_cleaned=extract_tbl.get("keep_cleaned", True),
    )

    refine_tbl = _section(data, "refine")
    refine = RefineConfig(
        endpoint_a=_endpoint(refine_tbl.get("endpoint_a"), "refine.endpoint_a", base_dir),
        endpoint_b=_endpoint(refine_tbl.get("endpoint_b"), "refine.endpoint_b", base_dir),
        prompt_template=_resolve(base_dir, refine_tbl["prompt_template"]) if refine_tbl.get("prompt_template") else None,
        split=refine_tbl.get("split", 0.5),
        seed=refine_tbl.get("seed", 7),
        unit_size=refine_tbl.get("unit_size", 64),
    )

    decontam_tbl = data.get("decontam", {})
    try:
        decontam = DecontamConfig(**decontam_tbl)
    except TypeError as exc:
        raise ConfigError(f"decontam: {exc}") from exc

    assemble_tbl = dict(data.get("assemble", {}))
    subject_tbl = assemble_tbl.pop("subject_endpoint", None)
    subject_endpoint = _endpoint(subject_tbl, "assemble.subject_endpoint", base_dir) if subject_tbl else None
    try:
        assemble = AssembleConfig(subject_endpoint=subject_endpoint, **assemble_tbl)
    except TypeError as exc:
        raise ConfigError(f"assemble: {exc}") from exc

    config = PipelineConfig(
        paths=paths,
        classifier=classifier,
        recall=recall,
        judge_round1=judge_round1,
        judge_round2=judge_round2,
        extract=extract,
        refine=refine,
        decontam=decontam,
        assemble=assemble,
    )
    validate_config(config)
    return config


def validate_config(config: PipelineConfig) -> None:
    def require(cond: bool, path: str, message: str) -> None:
        if not cond:
            raise ConfigError(f"{path}: {message}")

    p = config.paths
    require(p.corpus_manifest.exists(), "paths.corpus_manifest", f"does not exist: {p.corpus_manifest}")
    require(p.seed_examples.exists(), "paths.seed_examples", f"does not exist: {p.seed_examples}")
    require(p.benchmarks_dir.exists(), "paths.benchmarks_dir", f"does not exist: {p.benchmarks_dir}")
    r = config.recall
    require(r.token_budget_round1 > 0, "recall.token_budget_round1", "must be positive")
    require(r.token_budget_round2 > 0, "recall.token_budget_round2", "must be positive")
    require(0.0 <= r.threshold <= 1.0, "recall.threshold", "must be in [0, 1]")
    require(r.min_docs >= 1, "recall.min_docs", "must be >= 1")
    require(r.per_class_cap >= 1, "recall.per_class_cap", "must be >= 1")
    require(r.triage_batch_size >= 1, "recall.triage_batch_size", "must be >= 1")
    require(0.0 <= config.refine.split <= 1.0, "refine.split", "must be in [0, 1]")
    require(config.refine.unit_size >= 1, "refine.unit_size", "must be >= 1")
    require(config.extract.unit_size >= 1, "extract.unit_size", "must be >= 1")
    require(config.decontam.ngram_order >= 2, "decontam.ngram_order", "must be >= 2")
    require(
        config.decontam.scope in ("source-page", "pair-text"),
        "decontam.scope", "must be source-page or pair-text",
    )
    require(config.assemble.audit_n >= 1, "assemble.audit_n", "must be >= 1")
    if config.extract.prompt_template is not None:
        require(config.extract.prompt_template.exists(), "extract.prompt_template",
                f"does not exist: {config.extract.prompt_template}")
    if config.refine.prompt_template is not None:
        require(config.refine.prompt_template.exists(), "refine.prompt_template",
                f"does not exist: {config.refine.prompt_template}")
    if config.assemble.label_subjects:
        require(config.assemble.subject_endpoint is not None, "assemble.subject_endpoint",
                "required when label_subjects is enabled")


def config_to_tables(config: PipelineConfig) -> dict:
    """Nested plain-dict form, ready for TOML serialization."""
    def endpoint_table(ep: LlmEndpoint) -> dict:
        return {k: v for k, v in ep.to_dict().items() if v is not None}

    tables: dict = {
        "paths": {
            "corpus_manifest": str(config.paths.corpus_manifest),
            "seed_examples": str(config.paths.seed_examples),
            "benchmarks_dir": str(config.paths.benchmarks_dir),
            "output_dir": str(config.paths.output_dir),
        },
        "classifier": config.classifier.to_dict(),
        "recall": {
            "threshold": config.recall.threshold,
            "token_budget_round1": config.recall.token_budget_round1,
            "token_budget_round2": config.recall.token_budget_round2,
            "min_docs": config.recall.min_docs,
            "per_class_cap": config.recall.per_class_cap,
            "triage_batch_size": config.recall.triage_batch_size,
            "seed": config.recall.seed,
            "judge_round1": endpoint_table(config.judge_round1),
            "judge_round2": endpoint_table(config.judge_round2),
        },
        "extract": {
            "unit_size": config.extract.unit_size,
            "keep_cleaned": config.extract.keep_cleaned,
            "endpoint": endpoint_table(config.extract.endpoint),
        },
        "refine": {
            "split": config.refine.split,
            "seed": config.refine.seed,
            "unit_size": config.refine.unit_size,
            "endpoint_a": endpoint_table(config.refine.endpoint_a),
            "endpoint_b": endpoint_table(config.refine.endpoint_b),
        },
        "decontam": {
            "ngram_order": config.decontam.ngram_order,
            "scope": config.decontam.scope,
        },
        "assemble": {
            "label_subjects": config.assemble.label_subjects,
            "audit_n": config.assemble.audit_n,
            "audit_seed": config.assemble.audit_seed,
            "top_domains": config.assemble.top_domains,
        },
    }
    if config.paths.cache_dir is not None:
        tables["paths"]["cache_dir"] = str(config.paths.cache_dir)
    if config.extract.prompt_template is not None:
        tables["extract"]["prompt_template"] = str(config.extract.prompt_template)
    if config.refine.prompt_template is not None:
        tables["refine"]["prompt_template"] = str(config.refine.prompt_template)
    if config.assemble.subject_endpoint is not None:
        tables["assemble"]["subject_endpoint"] = endpoint_table(config.assemble.subject_endpoint)
    return tables


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if any(c in text for c in ".einf") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


def _emit_table(lines: list[str], name: str, table: dict) -> None:
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    lines.append(f"[{name}]")
    for key, value in scalars.items():
        lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")
    for key, value in subtables.items():
        _emit_table(lines, f"{name}.{key}", value)


def dump_config(config: PipelineConfig) -> str:
    """Serialize back to TOML; parse(dump(c)) equals c for absolute paths."""
    lines: list[str] = []
    for name, table in config_to_tables(config).items():
        _emit_table(lines, name, table)
    return "\n".join(lines)
