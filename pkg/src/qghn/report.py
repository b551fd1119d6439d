"""Plain-text results tables (rows by bitwidth, columns by test split)."""

from __future__ import annotations

import json
from typing import Iterable, Optional

from .evaluate import EvalEntry, Stat

SPLIT_COLUMNS = (("id", "Test"), ("deep", "Deep"), ("wide", "Wide"), ("bnfree", "BN-Free"))
CELL_WIDTH = 16
ROW_WIDTH = 22


def format_cell(st: Optional[Stat]) -> str:
    """``"M±S; X"`` with one decimal each."""
    if st is None:
        return "-"
    return f"{st.mean:.1f}±{st.sem:.1f}; {st.max:.1f}"


def _line(first: str, cells: Iterable[str]) -> str:
    return f"{first:<{ROW_WIDTH}}| " + " | ".join(f"{c:<{CELL_WIDTH}}" for c in cells)


def _header(metric_title: str) -> list:
    top = _line(metric_title, ["ID"] + ["OOD"] + [""] * (len(SPLIT_COLUMNS) - 2))
    sub = _line("by Bitwidth", [title for _, title in SPLIT_COLUMNS])
    return [top.rstrip(), sub.rstrip(), "-" * len(sub)]


def _row_order(entries: list) -> list:
    rows = []
    for e in entries:
        if e.row not in rows:
            rows.append(e.row)
    return rows


def render_table(entries: list) -> str:
    """Top-1 and Top-5 blocks; one row per scheme label, "-" for missing cells."""
    lines = []
    rows = _row_order(entries)
    cells = {(e.row, e.split): e for e in entries}
    for metric, title in (("top1", "Top-1 Accuracy"), ("top5", "Top-5 Accuracy")):
        lines += _header(title)
        for row in rows:
            vals = []
            for split, _ in SPLIT_COLUMNS:
                e = cells.get((row, split))
                vals.append(format_cell(getattr(e, metric)) if e else "-")
            lines.append(_line(row, vals).rstrip())
        lines.append("")
    return "\n".join(lines)


def entries_to_jsonl(entries: list) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for e in entries for r in e.to_records())


def entries_from_jsonl(text: str) -> list:
    """Inverse of :func:`entries_to_jsonl` (pairs top1/top5 records back up)."""
    pending: dict = {}
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        key = (r["row"], r["split"], r["variant"])
        st = None if r["mean"] is None else Stat(r["mean"], r["sem"], r["max"], r["n"], r.get("single", False))
        e = pending.get(key)
        if e is None:
            e = EvalEntry(r["row"], r["split"], None, None, r["n_graphs"], r["n_failed"], r["variant"], r.get("meta", {}))
            pending[key] = e
            out.append(e)
        setattr(e, r["metric"], st)
    return out


def render_report(entries: list, diagnostics: Optional[list] = None, notes: Optional[list] = None) -> str:
    """Full text report: main table (failures excluded), a failures-as-0 table
    when any graph failed, failure counts and training diagnostics."""
    ok = [e for e in entries if e.variant == "ok"]
    everything = [e for e in entries if e.variant == "all"]
    parts = ["Accuracy of quantized CNNs with predicted parameters (Mean%±SEM; Max%)", "", render_table(ok)]
    if any(e.n_failed for e in everything):
        parts += ["Same, failed graphs scored as 0%:", "", render_table(everything)]
    parts.append("Graphs evaluated / failed:")
    for e in ok:
        parts.append(f"  {e.row:<20} {e.split:<8} {e.n_graphs:>5} / {e.n_failed}")
    if diagnostics:
        parts += ["", "Training diagnostics:"]
        for d in diagnostics:
            parts.append(
                "  {scheme:<8} mode={mode:<10} steps={steps:<6} nan_steps={nan_steps:<4} aborted={aborted!s:<5} "
                "loss {first} -> {last} (decreased={loss_decreased})".format(
                    first=_fmt_loss(d.get("first_epoch_loss")), last=_fmt_loss(d.get("last_epoch_loss")), **d
                )
            )
    if notes:
        parts += [""] + list(notes)
    return "\n".join(parts).rstrip() + "\n"


def _fmt_loss(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"
