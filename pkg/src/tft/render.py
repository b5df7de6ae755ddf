"""Deterministic text outputs: loss and flow CSVs, flow-map SVG."""

import numpy as np

ARROW = (
    '<marker id="arrow" viewBox="0 0 10 10" refX="10" refY="5" markerWidth="4" markerHeight="4" '
    'orient="auto-start-reverse"><path d="M 0 0 L 10 5 L 0 10 z" fill="black"/></marker>'
)


def _num(v):
    s = f"{float(v):.4f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def write_history_csv(history, path):
    """``step,loss`` rows; losses written with full precision so reruns compare byte for byte."""
    lines = ["step,loss"] + [f"{int(s)},{float(v)!r}" for s, v in history]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_history_csv(path):
    with open(path) as fh:
        rows = fh.read().split()[1:]
    return [(int(a), float(b)) for a, b in (r.split(",") for r in rows)]


def write_flow_csv(field, path):
    lines = ["x0,y0,x1,y1,valid"]
    for (x0, y0), (x1, y1), ok in zip(field.starts, field.ends, field.valid):
        lines.append(f"{float(x0)!r},{float(y0)!r},{float(x1)!r},{float(y1)!r},{int(bool(ok))}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def flow_svg(field, zero_tol=1e-9):
    """SVG text for a flow field: arrows for moving points, dots for fixed ones, crosses for invalid ones."""
    if len(field) == 0:
        raise ValueError("empty flow field")
    H, W = field.shape
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{10 * W}" height="{10 * H}">',
        f"<defs>{ARROW}</defs>",
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
    ]
    for (x0, y0), (x1, y1), ok in zip(field.starts, field.ends, field.valid):
        if not ok:
            d = 0.3
            out.append(
                f'<path class="invalid" d="M {_num(x0 - d)} {_num(y0 - d)} L {_num(x0 + d)} {_num(y0 + d)} '
                f'M {_num(x0 - d)} {_num(y0 + d)} L {_num(x0 + d)} {_num(y0 - d)}" stroke="red" stroke-width="0.1"/>'
            )
        elif np.hypot(x1 - x0, y1 - y0) <= zero_tol:
            out.append(f'<circle cx="{_num(x0)}" cy="{_num(y0)}" r="0.25" fill="black"/>')
        else:
            out.append(
                f'<line x1="{_num(x0)}" y1="{_num(y0)}" x2="{_num(x1)}" y2="{_num(y1)}" stroke="black" '
                f'stroke-width="0.1" marker-end="url(#arrow)"/>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_flow_svg(field, path):
    text = flow_svg(field)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
