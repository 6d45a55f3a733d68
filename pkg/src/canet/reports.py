"""Static reports: attention heatmap documents (HTML plus a plain-text
fallback), matplotlib figures rendered to files, delimited metric tables,
and multi-run comparisons with regularization-loss curve series.

Weights shown in any document are the model's attention outputs verbatim;
nothing is renormalized for display.
"""

from __future__ import annotations

import html
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .corpus import EncodedInstance, polarity_classes
from .evaluation import ACDReport, EvaluationError, MetricsReport, predict_dataset
from .network import Network
from .training import EpochRecord


@dataclass
class HeatmapRow:
    label: str
    weights: np.ndarray


@dataclass
class SentenceHeatmap:
    sentence_id: str
    tokens: list[str]
    alsc_rows: list[HeatmapRow]
    acd_rows: list[HeatmapRow]


def build_heatmaps(net: Network, encoded: list[EncodedInstance],
                   categories: list[str], mode: str) -> list[SentenceHeatmap]:
    """One document per sentence: a sentiment-attention row per mentioned
    aspect and a detection-attention row per predefined category."""
    classes = polarity_classes(mode)
    docs = []
    for inst, out in predict_dataset(net, encoded):
        alsc_rows = []
        for j, cat_idx in enumerate(inst.mention_cats):
            gold = classes[inst.mention_pols[j]]
            predicted = classes[int(np.argmax(out.alsc_probs[j]))]
            alsc_rows.append(HeatmapRow(
                label=f"{categories[cat_idx]} (gold {gold}, predicted {predicted})",
                weights=out.alsc_attention[j]))
        acd_rows = []
        for n in range(out.acd_attention.shape[0]):
            mark = "mentioned" if inst.acd_labels[n] == 1.0 else "unmentioned"
            acd_rows.append(HeatmapRow(
                label=f"{categories[n]} ({mark}, score {out.acd_scores[n]:.4f})",
                weights=out.acd_attention[n]))
        docs.append(SentenceHeatmap(inst.id, list(inst.tokens), alsc_rows, acd_rows))
    return docs


def _html_row(row: HeatmapRow, tokens: list[str]) -> str:
    cells = []
    for tok, w in zip(tokens, row.weights):
        w = float(w)
        cells.append(
            f'<span class="tok" style="background: rgba(214,69,27,{w:.6f})" '
            f'title="{w:.6f}">{html.escape(tok)}</span>')
    return (f'<div class="row"><div class="rowlabel">{html.escape(row.label)}'
            f'</div><div class="tokens">{"".join(cells)}</div></div>')


def render_heatmap_html(docs: list[SentenceHeatmap]) -> str:
    """Standalone markup document; cell intensity equals the weight itself."""
    parts = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8"><title>attention weights</title>',
        "<style>",
        "body { font-family: sans-serif; margin: 2em; }",
        ".tok { display: inline-block; padding: 2px 5px; margin: 1px; "
        "border: 1px solid #ddd; }",
        ".rowlabel { font-weight: bold; margin-top: 0.6em; }",
        ".sentence { margin-bottom: 2em; }",
        "</style></head><body>",
    ]
    for doc in docs:
        parts.append(f'<div class="sentence"><h2>{html.escape(doc.sentence_id)}</h2>')
        if doc.alsc_rows:
            parts.append("<h3>sentiment attention</h3>")
            parts.extend(_html_row(r, doc.tokens) for r in doc.alsc_rows)
        if doc.acd_rows:
            parts.append("<h3>category-detection attention</h3>")
            parts.extend(_html_row(r, doc.tokens) for r in doc.acd_rows)
        parts.append("</div>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def render_heatmap_text(docs: list[SentenceHeatmap]) -> str:
    """Plain-text fallback: token(weight) lists, weights to 6 decimals."""
    lines = []
    for doc in docs:
        lines.append(f"# {doc.sentence_id}")
        for section, rows in (("sentiment", doc.alsc_rows),
                              ("detection", doc.acd_rows)):
            for row in rows:
                body = " ".join(f"{tok}({float(w):.6f})"
                                for tok, w in zip(doc.tokens, row.weights))
                lines.append(f"[{section}] {row.label}: {body}")
        lines.append("")
    return "\n".join(lines)


def heatmap_figure(doc: SentenceHeatmap, path: str):
    """Render one sentence's attention rows as an image file."""
    rows = doc.alsc_rows + doc.acd_rows
    matrix = np.stack([r.weights for r in rows])
    fig, ax = plt.subplots(
        figsize=(max(4.0, 0.6 * len(doc.tokens)), max(2.0, 0.45 * len(rows) + 1.2)))
    im = ax.imshow(matrix, aspect="auto", cmap="Oranges", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(doc.tokens)), doc.tokens, rotation=45, ha="right")
    ax.set_yticks(range(len(rows)), [r.label for r in rows])
    ax.set_title(doc.sentence_id)
    fig.colorbar(im, ax=ax, label="attention weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# delimited tables


def metrics_tsv(report: MetricsReport, acd: ACDReport | None = None) -> str:
    lines = ["metric\tvalue",
             f"mode\t{report.mode}",
             f"count\t{report.count}",
             f"accuracy\t{report.accuracy:.6f}",
             f"macro_f1\t{report.macro_f1:.6f}"]
    for name, cm in report.per_class.items():
        lines.append(f"precision[{name}]\t{cm.precision:.6f}")
        lines.append(f"recall[{name}]\t{cm.recall:.6f}")
        lines.append(f"f1[{name}]\t{cm.f1:.6f}")
        lines.append(f"support[{name}]\t{cm.support}")
    if acd is not None:
        lines.append(f"acd_precision\t{acd.precision:.6f}")
        lines.append(f"acd_recall\t{acd.recall:.6f}")
        lines.append(f"acd_f1\t{acd.f1:.6f}")
        lines.append(f"acd_threshold\t{acd.threshold}")
        lines.append(f"acd_decisions\t{acd.count}")
    return "\n".join(lines) + "\n"


def compare_runs(histories: dict[str, list[EpochRecord]],
                 modes: dict[str, str] | None = None) -> tuple[str, str]:
    """Final-metric table plus aligned per-epoch curve series for several runs.

    Runs evaluated under different modes are rejected rather than merged.
    """
    if not histories:
        raise EvaluationError("compare_runs: no runs given")
    if modes is not None:
        distinct = {m for m in modes.values()}
        if len(distinct) > 1:
            raise EvaluationError(f"compare_runs: mixed evaluation modes {sorted(distinct)}")

    names = list(histories)
    table = ["run\tepochs\tbest_val_acc\tbest_val_f1\tfinal_train_loss"
             "\tfinal_R_s\tfinal_R_o"]
    for name in names:
        hist = histories[name]
        if not hist:
            raise EvaluationError(f"compare_runs: run '{name}' has an empty history")
        best_acc = max(r.val_acc for r in hist)
        best_f1 = max(r.val_f1 for r in hist)
        last = hist[-1]
        table.append(f"{name}\t{len(hist)}\t{best_acc:.6f}\t{best_f1:.6f}"
                     f"\t{last.train_loss:.6f}\t{last.r_s:.6f}\t{last.r_o:.6f}")

    columns = ("train_loss", "R_s", "R_o", "val_acc")
    header = ["epoch"] + [f"{name}.{col}" for name in names for col in columns]
    by_epoch = {name: {r.epoch: r for r in histories[name]} for name in names}
    max_epoch = max(r.epoch for hist in histories.values() for r in hist)
    curve_lines = ["\t".join(header)]
    for epoch in range(1, max_epoch + 1):
        cells = [str(epoch)]
        for name in names:
            rec = by_epoch[name].get(epoch)
            if rec is None:
                cells.extend([""] * len(columns))
            else:
                cells.extend(["%.10g" % v for v in
                              (rec.train_loss, rec.r_s, rec.r_o, rec.val_acc)])
        curve_lines.append("\t".join(cells))
    return "\n".join(table) + "\n", "\n".join(curve_lines) + "\n"


def curves_figure(histories: dict[str, list[EpochRecord]], path: str):
    """Training-loss and penalty curves for several runs in one image file."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name, hist in histories.items():
        epochs = [r.epoch for r in hist]
        axes[0].plot(epochs, [r.train_loss for r in hist], label=name)
        axes[1].plot(epochs, [r.r_s for r in hist], label=f"{name} sparsity",
                     linestyle="--")
        axes[1].plot(epochs, [r.r_o for r in hist], label=f"{name} orthogonality")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("penalty value")
    for ax in axes:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def moving_average(values: list[float], end_epoch: int, window: int = 10) -> float:
    """Trailing mean of values[.. end_epoch], window clipped at the start;
    epochs are 1-based."""
    if not 1 <= end_epoch <= len(values):
        raise EvaluationError(f"moving_average: epoch {end_epoch} outside history")
    lo = max(0, end_epoch - window)
    return float(np.mean(values[lo:end_epoch]))
