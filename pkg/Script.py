class script(object):

    INDEX_BUILT_TXT = """✅ Index built
★ Corpus: {corpus}
★ Documents: {docs}
★ Terms: {terms}
★ k1 / b: {k1} / {b}
★ Directory: {directory} ({size})
★ Checksum: {checksum}"""

    SERVE_TXT = """🌐 Retriever serving {docs} documents on http://{host}:{port}/retrieve"""

    LOAD_SUMMARY_TXT = """📚 Dataset: {n} questions
★ Without gold titles: {without_gold}
★ Unresolved gold titles: {unresolved}"""

    RUN_TXT = """🔥 Run finished ({elapsed})
★ Method: {method} | k={k} | hops={hops} | ablations: {ablations}
★ Questions: {total} (skipped {skipped} already done)
★ Ok: {ok} | Failed: {failed}
★ LLM calls: {llm_calls} | Retrievals: {retrievals}
★ Fingerprint: {fingerprint}
★ Records: {out}
★ Finished at: {now}"""

    REPORT_HEADER = """📊 Metrics ({stage} retrieval) | normalization: {normalization} | averaging: {averaging}"""

    REPORT_TXT = """n={n}  failed={failed}  fallback_rate={fallback_rate:.3f}
EM={em:.4f}  F1={f1:.4f}  Accuracy={accuracy}
Recall={recall:.4f}  Precision={precision:.4f}  S-Precision={s_precision:.4f}  (no gold titles: {without_gold})"""

    SAMPLING_ROW = """  top_p={top_p:<5}  EM={em:.4f}  F1={f1:.4f}  n={n}"""

    RETRIEVAL_HEADER = """{stage:<14} {n:>5} {recall:>8} {precision:>10} {s_precision:>12}"""

    RETRIEVAL_ROW = """{stage:<14} {n:>5} {recall:>8.4f} {precision:>10.4f} {s_precision:>12.4f}"""

    CONVERT_TXT = """✅ Converted {n} {fmt} records → {out}"""

    CONVERT_CORPUS_TXT = """✅ Wrote {n} context paragraphs → {out}"""
