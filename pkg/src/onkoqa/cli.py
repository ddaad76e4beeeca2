"""Command-line entry point.

Subcommands mirror the workflow: `ingest` catalogue files to canonical TSV,
`generate` the instruction dataset, `evaluate` an endpoint on a test set,
`compare` per-epoch reports, `quality` for the annotation analysis, and
`mock-serve` to run the deterministic oracle server.

Configuration precedence is flags > config file (--config, JSON) > environment
(ONKOQA_BASE_URL, ONKOQA_MODEL); the effective configuration is echoed into
each run's manifest for provenance. All outputs land under --out.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, catalog, genset, mockllm, quality
from .codes import CodeSystem
from .evalharness import (
    EndpointConfig,
    EvalTask,
    SAMPLING_PRESETS,
    compare_checkpoints,
    evaluate_task,
    load_cases_tsv,
    render_report_table,
    report_from_dict,
    subsample,
    write_transcript,
)
from .templates import load_templates

log = logging.getLogger(__name__)

_SYSTEM_ALIASES = {
    "icd10gm": CodeSystem.ICD10GM,
    "alpha-id": CodeSystem.ICD10GM,
    "icdo-topo": CodeSystem.ICDO3_TOPOGRAPHY,
    "icdo3_topography": CodeSystem.ICDO3_TOPOGRAPHY,
    "icdo-morph": CodeSystem.ICDO3_MORPHOLOGY,
    "icdo3_morphology": CodeSystem.ICDO3_MORPHOLOGY,
    "ops": CodeSystem.OPS,
}


class CliError(Exception):
    """User-facing error: print the message, exit 1."""


def _ensure_out(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_run_manifest(out: Path, command: str, config: dict, outputs: list[str]) -> None:
    _write_json(
        out / "run_manifest.json",
        {
            "tool": "onkoqa",
            "version": __version__,
            "command": command,
            "config": config,
            "outputs": outputs,
        },
    )


def cmd_ingest(args: argparse.Namespace) -> int:
    out = _ensure_out(args)
    column_map = catalog.ColumnMap(
        code_column=int(args.code_col) if args.code_col.isdigit() else args.code_col,
        text_column=int(args.text_col) if args.text_col.isdigit() else args.text_col,
        delimiter=args.delimiter,
        has_header=not args.no_header,
    )
    manifest: dict = {}
    outputs: list[str] = []
    for spec_str in args.inputs:
        system_name, _, path = spec_str.partition("=")
        if not path:
            raise CliError(f"--input expects SYSTEM=PATH, got {spec_str!r}")
        system = _SYSTEM_ALIASES.get(system_name.lower())
        if system is None:
            raise CliError(f"unknown system {system_name!r}, use one of {sorted(_SYSTEM_ALIASES)}")
        try:
            cat = catalog.load_catalog(path, system, column_map)
        except catalog.CatalogError as exc:
            raise CliError(str(exc)) from exc
        target = out / f"{system.value}.tsv"
        catalog.write_canonical_tsv(cat, target)
        outputs.append(target.name)
        manifest.update(cat.manifest_dict())
        info = cat.source_manifest[system]
        print(
            f"{system.value}: {info.entry_count} entries, {len(info.rejects)} rejects "
            f"-> {target}"
        )
    _write_json(out / "ingest_manifest.json", manifest)
    _write_run_manifest(
        out,
        "ingest",
        {"inputs": args.inputs, "delimiter": args.delimiter, "has_header": not args.no_header},
        outputs + ["ingest_manifest.json"],
    )
    return 0


def _load_canonical(path: str | None, system: CodeSystem) -> catalog.Catalog | None:
    if path is None:
        return None
    try:
        return catalog.load_catalog(path, system)
    except catalog.CatalogError as exc:
        raise CliError(str(exc)) from exc


def cmd_generate(args: argparse.Namespace) -> int:
    out = _ensure_out(args)
    try:
        templates = load_templates(args.templates)
    except Exception as exc:
        raise CliError(f"cannot load templates: {exc}") from exc

    alpha = _load_canonical(args.alpha_id, CodeSystem.ICD10GM)
    ops = _load_canonical(args.ops, CodeSystem.OPS)
    topo = _load_canonical(args.icdo_topo, CodeSystem.ICDO3_TOPOGRAPHY)
    morph = _load_canonical(args.icdo_morph, CodeSystem.ICDO3_MORPHOLOGY)
    if alpha is None and ops is None and topo is None and morph is None:
        raise CliError("generate needs at least one catalogue (--alpha-id/--ops/...)")

    TK = genset.TaskKind
    parts: list[list[genset.QaPair]] = []
    sources: dict = {}
    try:
        if alpha is not None:
            tumor = catalog.filter_tumor(alpha)
            n_neg = args.negatives if args.negatives is not None else len(tumor)
            negatives = catalog.sample_negatives(alpha, n_neg, args.seed)
            recognition_pool = tumor.entries + negatives.entries
            parts.append(
                genset.generate_task(TK.ICD10_CODE, tumor.entries, templates[TK.ICD10_CODE], args.seed)
            )
            parts.append(
                genset.generate_task(
                    TK.RECOGNIZE_YN, recognition_pool, templates[TK.RECOGNIZE_YN], args.seed
                )
            )
            parts.append(
                genset.generate_task(
                    TK.RECOGNIZE_YN_CODE, recognition_pool, templates[TK.RECOGNIZE_YN_CODE], args.seed
                )
            )
            sources.update(alpha.manifest_dict())
        if ops is not None:
            parts.append(
                genset.generate_task(
                    TK.OPS_MAIN_CATEGORY, ops.entries, templates[TK.OPS_MAIN_CATEGORY], args.seed
                )
            )
            parts.append(
                genset.generate_task(TK.OPS_RECOGNIZE, ops.entries, templates[TK.OPS_RECOGNIZE], args.seed)
            )
            sources.update(ops.manifest_dict())
        if morph is not None:
            parts.append(
                genset.generate_task(
                    TK.ICDO_MORPHOLOGY, morph.entries, templates[TK.ICDO_MORPHOLOGY], args.seed
                )
            )
            sources.update(morph.manifest_dict())
        if topo is not None:
            parts.append(
                genset.generate_task(
                    TK.ICDO_TOPOGRAPHY, topo.entries, templates[TK.ICDO_TOPOGRAPHY], args.seed
                )
            )
            sources.update(topo.manifest_dict())

        dataset_path = out / "dataset.jsonl"
        manifest = genset.assemble_dataset(parts, args.seed, dataset_path, sources=sources)
    except (genset.GenerationError, ValueError) as exc:
        raise CliError(str(exc)) from exc

    _write_json(out / "dataset_manifest.json", manifest.as_dict())
    _write_run_manifest(
        out,
        "generate",
        {
            "alpha_id": args.alpha_id,
            "ops": args.ops,
            "icdo_topo": args.icdo_topo,
            "icdo_morph": args.icdo_morph,
            "negatives": args.negatives,
            "seed": args.seed,
            "templates": args.templates or "builtin",
        },
        ["dataset.jsonl", "dataset_manifest.json"],
    )
    print(f"wrote {manifest.total} pairs to {dataset_path}")

    if args.verify_table1:
        report = genset.verify_manifest(manifest)
        print(report.render())
        if not report.ok:
            return 1
    return 0


def _resolve(flag_value, config: dict, key: str, env: str | None, default=None):
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    if env and os.environ.get(env):
        return os.environ[env]
    return default


def cmd_evaluate(args: argparse.Namespace) -> int:
    out = _ensure_out(args)
    config: dict = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read config file {args.config}: {exc}") from exc

    base_url = _resolve(args.base_url, config, "base_url", "ONKOQA_BASE_URL")
    model = _resolve(args.model, config, "model", "ONKOQA_MODEL", "unknown")
    if not base_url:
        raise CliError("no endpoint: pass --base-url, config base_url, or ONKOQA_BASE_URL")
    preset = _resolve(args.preset, config, "preset", None, "deterministic")
    if preset not in SAMPLING_PRESETS:
        raise CliError(f"unknown preset {preset!r}, use one of {sorted(SAMPLING_PRESETS)}")

    cfg = EndpointConfig(
        base_url=base_url,
        model_name=model,
        sampling=SAMPLING_PRESETS[preset],
        max_in_flight=args.max_in_flight,
        timeout=args.timeout,
        short_answer_instruction=_resolve(
            args.short_answer_instruction, config, "short_answer_instruction", None
        ),
        token_env=args.token_env,
    )
    try:
        templates_by_task = load_templates(args.templates)
        templates = [t for group in templates_by_task.values() for t in group]
        cases = load_cases_tsv(args.cases)
        if args.subsample is not None:
            cases = subsample(cases, args.subsample, args.seed)
        tasks = list(EvalTask) if args.task == "all" else [EvalTask(args.task)]
        reports = {}
        for task in tasks:
            transcript, report = evaluate_task(
                cases,
                task,
                templates,
                cfg,
                args.seed,
                thinking_delimiter=args.thinking_delimiter,
                fixed_formulation=args.fixed_formulation,
            )
            write_transcript(transcript, out / f"transcript_{task.value}.jsonl")
            reports[task] = report
    except CliError:
        raise
    except Exception as exc:
        raise CliError(str(exc)) from exc

    _write_json(
        out / "report.json",
        {task.value: report.as_dict() for task, report in reports.items()},
    )
    table = render_report_table(reports)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    _write_run_manifest(
        out,
        "evaluate",
        {
            "cases": args.cases,
            "task": args.task,
            "base_url": base_url,
            "model": model,
            "preset": preset,
            "max_in_flight": args.max_in_flight,
            "timeout": args.timeout,
            "subsample": args.subsample,
            "seed": args.seed,
            "short_answer_instruction": cfg.short_answer_instruction,
            "thinking_delimiter": args.thinking_delimiter,
            "fixed_formulation": args.fixed_formulation,
        },
        [f"transcript_{t.value}.jsonl" for t in reports] + ["report.json", "report.txt"],
    )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    out = _ensure_out(args)
    reports: dict[int, dict[EvalTask, object]] = {}
    for spec_str in args.epochs:
        epoch_str, _, path = spec_str.partition("=")
        if not path:
            raise CliError(f"--epoch expects N=REPORT.json, got {spec_str!r}")
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read report {path}: {exc}") from exc
        reports[int(epoch_str)] = {
            EvalTask(name): report_from_dict(rep) for name, rep in data.items()
        }
    try:
        comparison = compare_checkpoints(reports)  # type: ignore[arg-type]
    except Exception as exc:
        raise CliError(str(exc)) from exc
    _write_json(out / "comparison.json", comparison.as_dict())
    text = comparison.render()
    (out / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    _write_run_manifest(out, "compare", {"epochs": args.epochs}, ["comparison.json", "comparison.txt"])
    return 0


def cmd_quality(args: argparse.Namespace) -> int:
    out = _ensure_out(args)
    try:
        annotations = quality.load_annotation_tsv(args.annotations)
        raters = quality.split_raters(annotations)
        if len(raters) != 2:
            raise CliError(f"need exactly two raters, found {sorted(raters)}")
        rater_a, rater_b = (raters[r] for r in sorted(raters))
        summary = quality.agreement_summary(rater_a, rater_b)
        consensus = quality.load_annotation_tsv(args.consensus, consensus=True)
        report_icd10 = quality.derivability_report(consensus, quality.RatedSystem.ICD10)
        report_icdo = quality.derivability_report(consensus, quality.RatedSystem.ICDO)
    except (quality.QualityError, OSError) as exc:
        raise CliError(str(exc)) from exc

    lines = [
        f"kappa icd10={summary.kappa_icd10:.2f} icdo={summary.kappa_icdo:.2f} "
        f"reason={summary.kappa_reason:.2f} (n={summary.n})",
        f"{'Code':<8}{'Fully derivable (%)':<22}{'Partially derivable (%)':<26}{'Not derivable (%)':<20}",
        f"{'ICD-10':<8}{report_icd10.row()}",
        f"{'ICD-O':<8}{report_icdo.row()}",
        f"ICD-10 ceilings: exact {report_icd10.ceiling_exact:.0f}%, "
        f"partial {report_icd10.ceiling_partial:.0f}%",
        f"ICD-O ceilings: exact {report_icdo.ceiling_exact:.0f}%, "
        f"partial {report_icdo.ceiling_partial:.0f}%",
    ]
    text = "\n".join(lines)
    print(text)
    (out / "quality_report.txt").write_text(text + "\n", encoding="utf-8")
    _write_json(
        out / "quality_report.json",
        {
            "agreement": summary.as_dict(),
            "derivability": {
                "icd10": report_icd10.as_dict(),
                "icdo": report_icdo.as_dict(),
            },
        },
    )
    _write_run_manifest(
        out,
        "quality",
        {"annotations": args.annotations, "consensus": args.consensus},
        ["quality_report.json", "quality_report.txt"],
    )
    return 0


def cmd_mock_serve(args: argparse.Namespace) -> int:
    if args.config:
        cfg = mockllm.load_oracle_config(args.config)
    elif args.cases:
        cases = load_cases_tsv(args.cases)
        gold_map = {
            c.diagnosis_text: mockllm.GoldEntry(
                icd10=c.gold_icd10, icdo_topo=c.gold_icdo_topo, is_tumor=c.is_tumor
            )
            for c in cases
        }
        rates = mockllm.OracleRates(*(float(x) for x in args.rates.split(",")))
        cfg = mockllm.OracleConfig(
            gold_map=gold_map,
            rates=rates,
            latency_ms=args.latency_ms,
            seed=args.seed,
        )
    else:
        raise CliError("mock-serve needs --config or --cases")
    handle = mockllm.serve(cfg, host=args.host, port=args.port)
    print(f"mock oracle serving on {handle.base_url} (Ctrl+C to stop)")
    try:
        handle.thread.join()
    except KeyboardInterrupt:
        handle.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onkoqa", description=__doc__)
    parser.add_argument("--version", action="version", version=f"onkoqa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert catalogue files to canonical TSV")
    p.add_argument("--input", dest="inputs", action="append", required=True, metavar="SYSTEM=PATH")
    p.add_argument("--out", required=True)
    p.add_argument("--code-col", default="code")
    p.add_argument("--text-col", default="text")
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--no-header", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("generate", help="generate the instruction dataset")
    p.add_argument("--alpha-id", help="canonical TSV of ICD-10-GM diagnosis descriptions")
    p.add_argument("--ops", help="canonical TSV of OPS procedures")
    p.add_argument("--icdo-topo", help="canonical TSV of ICD-O topography descriptions")
    p.add_argument("--icdo-morph", help="canonical TSV of ICD-O morphology descriptions")
    p.add_argument("--negatives", type=int, help="non-tumor sample size (default: tumor count)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--templates", help="template TSV (default: builtin)")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--verify-table1",
        action="store_true",
        help="check counts against the published reference distribution",
    )
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="evaluate a chat-completions endpoint")
    p.add_argument("--cases", required=True, help="test-set TSV")
    p.add_argument("--task", default="all", choices=["all"] + [t.value for t in EvalTask])
    p.add_argument("--base-url")
    p.add_argument("--model")
    p.add_argument("--preset", choices=sorted(SAMPLING_PRESETS))
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--subsample", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--templates")
    p.add_argument("--short-answer-instruction")
    p.add_argument("--thinking-delimiter", default="</think>")
    p.add_argument("--fixed-formulation", type=int)
    p.add_argument("--token-env", default="OPENAI_API_KEY")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare per-epoch evaluation reports")
    p.add_argument("--epoch", dest="epochs", action="append", required=True, metavar="N=REPORT.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("quality", help="inter-rater agreement and derivability report")
    p.add_argument("--annotations", required=True, help="two-rater annotation TSV")
    p.add_argument("--consensus", required=True, help="consensus TSV (no rater_id)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("mock-serve", help="run the deterministic mock oracle server")
    p.add_argument("--config", help="oracle config JSON")
    p.add_argument("--cases", help="build the gold map from a test-set TSV")
    p.add_argument("--rates", default="1.0,0.0,0.0,0.0", help="exact,category_only,malformed,refuse")
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(func=cmd_mock_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("httpx").setLevel(logging.WARNING)  # one line per request is too chatty
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
