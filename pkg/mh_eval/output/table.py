from __future__ import annotations

from typing import List, Sequence

import pandas as pd


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Plain-text table: " | " between cells, "-+-" under the header."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def fmt_row(row: Sequence[str]) -> str:
        return " | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()

    lines = [fmt_row(headers), "-+-".join("-" * w for w in widths)]
    lines.extend(fmt_row(row) for row in rows)
    return "\n".join(lines) + "\n"


def format_csv(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    frame = pd.DataFrame([list(r) for r in rows], columns=list(headers), dtype=str)
    return frame.to_csv(index=False, lineterminator="\n")


class TablePrinter:
    def print(self, headers: List[str], rows: List[List[str]], empty_message: str = "No results.") -> None:
        if not rows:
            print(empty_message)
            return
        print(format_table(headers, rows), end="")
