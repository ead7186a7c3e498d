import sys
import json
import asyncio
import logging
import argparse

# ==========================================================
# LOGGING SETUP
# ==========================================================
from info import (
    LOG_LEVEL, TIME_ZONE, ABLATIONS, DATASET_FAMILIES, METHODS, ConfigError, RetrieverSpec, load_config,
)

logger = logging.getLogger(__name__)


def setup_logging(level: str = LOG_LEVEL):
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler()]
    )
    # ✅ Suppress noisy logs from aiohttp & the genai client
    logging.getLogger('aiohttp.access').setLevel(logging.WARNING)
    logging.getLogger('aiohttp.server').setLevel(logging.WARNING)
    logging.getLogger('google_genai').setLevel(logging.WARNING)


def install_uvloop():
    try:
        import uvloop
        asyncio.set_event_loop_policy(uvloop.EventLoopPolicy())
    except ImportError:
        pass


# ==========================================================
# IMPORTS
# ==========================================================
from aiohttp import web

from Script import script
from database.bm25_index import IndexStoreError, build_index, save_index
from database.converters import RAW_FORMATS, context_corpus, convert_dataset, read_raw, write_jsonl
from database.corpus_store import CorpusError, load_corpus, load_dataset, summarize_dataset
from plugins.evaluation import EvaluationError, RETRIEVAL_STAGES, ReportOptions, evaluate, retrieval_table
from database.records_db import load_records
from plugins.llm_gateway import AuthFailure, LlmError
from plugins.pipeline import build_deps, open_local_index, run_batch
from plugins.prompts import PromptError
from plugins.retrieval import RetrievalError
from utils import BackendUnavailable, dir_size, get_readable_time, get_size, now_str
from web import make_web_app

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_BACKEND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Usage problems print help and exit 1."""

    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ==========================================================
# COMMANDS
# ==========================================================
def cmd_index_build(args) -> int:
    corpus = load_corpus(args.corpus)
    index = build_index(corpus, args.k1, args.b)
    save_index(index, args.out)
    print(script.INDEX_BUILT_TXT.format(
        corpus=args.corpus, docs=index.doc_count, terms=len(index.postings), k1=index.k1, b=index.b,
        directory=args.out, size=get_size(dir_size(args.out)), checksum=index.corpus_checksum,
    ))
    return EXIT_OK


async def _serve(index, host: str, port: int):
    runner = web.AppRunner(make_web_app(index), access_log=None)
    await runner.setup()
    await web.TCPSite(runner, host, port).start()
    logger.info(f"✅ Retriever started on {host}:{port}")
    print(script.SERVE_TXT.format(docs=index.doc_count, host=host, port=port))
    try:
        await asyncio.Event().wait()
    finally:
        await runner.cleanup()


def cmd_index_serve(args) -> int:
    if not (args.corpus or args.index):
        print("index serve: give --corpus, --index or both", file=sys.stderr)
        return EXIT_USAGE
    index = open_local_index(RetrieverSpec(corpus_path=args.corpus, index_dir=args.index, k1=args.k1, b=args.b))
    try:
        asyncio.run(_serve(index, args.host, args.port))
    except KeyboardInterrupt:
        logger.info("Retriever stopped. Bye 👋")
    return EXIT_OK


def run_overrides(args) -> dict:
    retriever = {"corpus_path": args.corpus, "index_dir": args.index, "k1": args.k1, "b": args.b}
    if args.retriever_url:
        retriever.update(kind="remote", url=args.retriever_url)
    elif args.corpus or args.index:
        retriever["kind"] = "bm25"
    llm = {"kind": args.llm_kind, "base_url": args.llm_url, "model": args.llm_model, "script_path": args.script}
    if args.script and not args.llm_kind:
        llm["kind"] = "scripted"
    return {
        "method": args.method,
        "k": args.k,
        "hops": args.hops,
        "ablations": args.ablate,
        "dataset_family": args.dataset_family,
        "filter_strategy": args.filter_strategy,
        "sampling": args.top_p,
        "per_doc_char_budget": args.char_budget,
        "cache_dir": args.cache_dir,
        "prompts_dir": args.prompts_dir,
        "concurrency_limit": args.concurrency,
        "use_cache": False if args.no_cache else None,
        "retriever": retriever,
        "llm": llm,
    }


async def _run(config, examples, out_path, limit):
    deps = await build_deps(config)
    try:
        # a remote retriever has no local corpus to resolve gold titles against
        load = summarize_dataset(examples, getattr(deps.retriever, "corpus", None))
        print(script.LOAD_SUMMARY_TXT.format(
            n=load.n, without_gold=load.without_gold_titles, unresolved=load.unresolved_titles
        ))
        return await run_batch(examples, config, deps, out_path, limit)
    finally:
        await deps.close()


def cmd_run(args) -> int:
    config = load_config(args.config, run_overrides(args))
    examples = load_dataset(args.dataset)
    summary = asyncio.run(_run(config, examples, args.out, args.limit))
    print(script.RUN_TXT.format(
        elapsed=get_readable_time(summary.elapsed), method=config.method, k=config.k, hops=config.hops,
        ablations=", ".join(sorted(config.ablations)) or "none", total=summary.total,
        skipped=summary.skipped, ok=summary.ok, failed=summary.failed, llm_calls=summary.llm_calls,
        retrievals=summary.retrievals, fingerprint=summary.fingerprint, out=args.out,
        now=now_str(TIME_ZONE),
    ))
    return EXIT_OK


def print_report(result):
    print(script.REPORT_HEADER.format(stage=result.retrieval_stage, **result.labels))
    accuracy = "n/a" if result.accuracy is None else f"{result.accuracy:.4f}"
    print(script.REPORT_TXT.format(
        n=result.n, failed=result.failed, fallback_rate=result.fallback_rate, em=result.em, f1=result.f1,
        accuracy=accuracy, recall=result.recall, precision=result.precision,
        s_precision=result.s_precision, without_gold=result.without_gold_titles,
    ))
    for row in result.per_sampling:
        print(script.SAMPLING_ROW.format(**row))


def cmd_eval(args) -> int:
    header, records = load_records(args.records)
    examples = load_dataset(args.dataset)
    result = evaluate(records, examples, ReportOptions(retrieval_stage=args.retrieval_stage))
    print_report(result)
    out = args.json_out or f"{args.records}.metrics.json"
    report = result.to_dict()
    report["config_fingerprint"] = (header or {}).get("config_fingerprint")
    report["generated_at"] = now_str(TIME_ZONE)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, ensure_ascii=False)
    logger.info(f"✅ Report written to {out}")
    return EXIT_OK


def cmd_retrieval_eval(args) -> int:
    _, records = load_records(args.records)
    examples = load_dataset(args.dataset)
    table = retrieval_table(records, examples)
    print(script.RETRIEVAL_HEADER.format(
        stage="stage", n="n", recall="recall", precision="precision", s_precision="s_precision"
    ))
    for stage, row in table.items():
        print(script.RETRIEVAL_ROW.format(stage=stage, **row))
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as f:
            json.dump(table, f, indent=2)
    return EXIT_OK


def cmd_convert(args) -> int:
    items = read_raw(args.input)
    examples = convert_dataset(args.format, items)
    n = write_jsonl(args.out, examples)
    print(script.CONVERT_TXT.format(n=n, fmt=args.format, out=args.out))
    if args.corpus_out:
        docs = context_corpus(items)
        print(script.CONVERT_CORPUS_TXT.format(n=write_jsonl(args.corpus_out, docs), out=args.corpus_out))
    return EXIT_OK


# ==========================================================
# PARSER
# ==========================================================
def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="blendfilter", description="Query blending + knowledge filtering QA pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    index = sub.add_parser("index", help="build or serve a BM25 index")
    index_sub = index.add_subparsers(dest="index_command", required=True)
    build = index_sub.add_parser("build")
    build.add_argument("--corpus", required=True)
    build.add_argument("--out", required=True)
    build.add_argument("--k1", type=float, default=1.2)
    build.add_argument("--b", type=float, default=0.75)
    build.set_defaults(func=cmd_index_build)
    serve = index_sub.add_parser("serve")
    serve.add_argument("--corpus")
    serve.add_argument("--index")
    serve.add_argument("--k1", type=float)
    serve.add_argument("--b", type=float)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8089)
    serve.set_defaults(func=cmd_index_serve)

    run = sub.add_parser("run", help="answer a dataset and write records.jsonl")
    run.add_argument("--config")
    run.add_argument("--dataset", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--dataset-family", choices=DATASET_FAMILIES)
    run.add_argument("--filter-strategy", choices=("two_stage_topic", "single_stage"))
    run.add_argument("--corpus")
    run.add_argument("--index", help="saved index directory; documents come from it when --corpus is not given")
    run.add_argument("--k1", type=float)
    run.add_argument("--b", type=float)
    run.add_argument("--retriever-url")
    run.add_argument("--llm-url")
    run.add_argument("--llm-kind", choices=("openai", "openai_chat", "gemini", "scripted"))
    run.add_argument("--llm-model")
    run.add_argument("--script", help="scripted-LLM rules (JSON)")
    run.add_argument("--k", type=int)
    run.add_argument("--hops", type=int)
    run.add_argument("--ablate", nargs="+", choices=ABLATIONS)
    run.add_argument("--top-p", nargs="+", type=float)
    run.add_argument("--limit", type=int)
    run.add_argument("--char-budget", type=int)
    run.add_argument("--concurrency", type=int)
    run.add_argument("--cache-dir")
    run.add_argument("--no-cache", action="store_true")
    run.add_argument("--prompts-dir")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="EM/F1/accuracy and retrieval metrics")
    ev.add_argument("--records", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--retrieval-stage", choices=RETRIEVAL_STAGES, default="pool")
    ev.add_argument("--json-out")
    ev.set_defaults(func=cmd_eval)

    rev = sub.add_parser("retrieval-eval", help="retrieval metrics for every stage")
    rev.add_argument("--records", required=True)
    rev.add_argument("--dataset", required=True)
    rev.add_argument("--json-out")
    rev.set_defaults(func=cmd_retrieval_eval)

    conv = sub.add_parser("convert-dataset", help="raw benchmark file → dataset.jsonl")
    conv.add_argument("--format", required=True, choices=RAW_FORMATS)
    conv.add_argument("--input", required=True)
    conv.add_argument("--out", required=True)
    conv.add_argument("--corpus-out", help="also write the records' context paragraphs as a corpus")
    conv.set_defaults(func=cmd_convert)
    return parser


# ==========================================================
# MAIN EXECUTION
# ==========================================================
def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    setup_logging("DEBUG" if args.verbose else LOG_LEVEL)
    try:
        return args.func(args)
    except (BackendUnavailable, AuthFailure) as e:
        logger.error(f"❌ Backend unavailable: {e}")
        return EXIT_BACKEND
    except (ConfigError, CorpusError, IndexStoreError, PromptError, LlmError,
            RetrievalError, EvaluationError, OSError, json.JSONDecodeError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_IO


if __name__ == "__main__":
    install_uvloop()
    sys.exit(main())
