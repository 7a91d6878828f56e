"""CSV and float-formatting helpers.

Every CSV the package writes goes through `write_csv` so the byte-level
format is identical across runs and platforms: '\n' line endings, header
row first, floats rendered with `repr` (shortest round-trip form), ints
as plain decimals, None as the empty field.
"""

import numpy as np


def fmt(value):
    """Render one cell deterministically."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    """Write rows (iterables of cells) under a header to `path`."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(c) for c in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
