"""
Aligned plain-text tables for terminal output.
"""

from typing import Optional, Sequence


def format_cell(value, digits: int = 3) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if value != value:
            return ""
        return f"{value:.{digits}f}"
    return str(value)


def render_table(
    headers: Sequence[str],
    rows: Sequence[Sequence],
    digits: int = 3,
    marks: Optional[set] = None,
) -> str:
    """
    Render rows as an aligned text table.

    Args:
        headers: Column titles
        rows: Row values; ``None`` renders as a blank cell
        digits: Decimal places for floats
        marks: Optional set of (row_index, column_index) cells to suffix with ``*``

    Returns:
        str: The table, one line per row, with a dashed rule under the header
    """
    marks = marks or set()
    cells = []
    for r, row in enumerate(rows):
        line = []
        for c, value in enumerate(row):
            text = format_cell(value, digits)
            if (r, c) in marks:
                text += "*"
            line.append(text)
        cells.append(line)

    widths = [len(h) for h in headers]
    for line in cells:
        for c, text in enumerate(line):
            widths[c] = max(widths[c], len(text))

    def _join(values):
        return "  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(values, widths)))

    out = [_join(list(headers)), "  ".join("-" * w for w in widths)]
    out.extend(_join(line) for line in cells)
    return "\n".join(out)
