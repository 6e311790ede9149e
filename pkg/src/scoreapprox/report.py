"""Plain-text run reports.

A report is a few ``#`` header lines for people, followed by sections::

    [section]
    key = value

Matrices are written one row per key (``row0 = a b c``).  :func:`parse_report`
turns the text back into nested dicts of strings.
"""
import numpy as np


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (list, tuple, np.ndarray)):
        return " ".join(_fmt(v) for v in np.ravel(x))
    return str(x)


def _section(name, items):
    lines = [f"[{name}]"]
    lines += [f"{k} = {_fmt(v)}" for k, v in items]
    return lines


def _matrix(name, M):
    return _section(name, [(f"row{i}", row) for i, row in enumerate(np.atleast_2d(M))])


def format_fit_report(fit, config=None, grid_info=None, title="fit report"):
    names = list(fit.param_names)
    lines = [f"# scoreapprox {title}"]
    lines.append("# " + "  ".join(f"{n}={v:.6g}" for n, v in zip(names, fit.theta)))
    if fit.info is not None:
        lines.append("# sd ratio (godambe/fisher): "
                     + "  ".join(f"{n}={r:.4f}" for n, r in zip(names, fit.sd_ratio())))
    lines.append("")
    if config:
        lines += _section("config", sorted(config.items()))
    if grid_info:
        lines += _section("grid", grid_info.items())
    lines += _section("estimate", zip(names, fit.theta))
    lines += _section("residual", [("g", fit.g), ("g_norm", fit.g_norm), ("status", fit.status)])
    if fit.info is not None:
        info = fit.info
        lines += _section("sd", [
            ("names", " ".join(names)),
            ("godambe", info.sd_godambe()),
            ("fisher", info.sd_fisher()),
            ("ratio", info.sd_ratio()),
            ("N", info.N),
            ("N2", info.N2),
        ])
        lines += _matrix("I_hat", info.I_hat)
        lines += _matrix("J_hat", info.J_hat)
        lines += _matrix("G_hat", info.G_hat)
    lines += _section("seeds", fit.seeds.items())
    lines += _section("timings", fit.timings.items())
    extra = {k: v for k, v in fit.extra.items() if not isinstance(v, list)}
    if extra:
        lines += _section("diagnostics", extra.items())
    lines.append("[trace]")
    for k, row in enumerate(fit.trace):
        lines.append(f"step{k} = " + " ".join(f"{a}:{_fmt(b)}".replace(" ", ",")
                                            for a, b in row.items()))
    return "\n".join(lines) + "\n"


def format_table(header, rows):
    """Tab-separated table with a header line."""
    out = ["\t".join(header)]
    for row in rows:
        out.append("\t".join(_fmt(x) if not isinstance(x, str) else x for x in row))
    return "\n".join(out) + "\n"


def parse_report(text):
    sections = {}
    current = None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], {})
            continue
        key, _, value = line.partition(" = ")
        if current is None:
            raise ValueError(f"key outside a section: {line!r}")
        current[key] = value
    return sections


def parse_matrix(section):
    rows = [section[k] for k in sorted(section, key=lambda s: int(s[3:]))]
    return np.array([[float(x) for x in r.split()] for r in rows])
