import csv
import json
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

PathLike = Union[str, Path]


@lru_cache(maxsize=None)
def _pyplot():
    """pyplot on the Agg backend, loaded on first drawing."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed salt and no date so identical drawings give identical bytes
    matplotlib.rcParams["svg.hashsalt"] = "drhg"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt

Edge = Tuple[Tuple[float, float], Tuple[float, float]]


def write_jsonl(path: PathLike, docs: Iterable[dict]) -> int:
    """Write one compact JSON document per line, returns the line count"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    try:
        with open(path, "w") as f:
            for doc in docs:
                f.write(json.dumps(doc, separators=(",", ":")) + "\n")
                count += 1
        return count
    except Exception as e:
        logger.error(f"Error writing {path}: {e}")
        raise


def read_jsonl(path: PathLike) -> Iterator[dict]:
    """Stream JSON documents from a JSON-lines file, skipping blank lines"""
    try:
        with open(path, "r") as f:
            for line_no, line in enumerate(f, 1):
                if line.strip():
                    try:
                        yield json.loads(line)
                    except json.JSONDecodeError as e:
                        raise ValueError(f"{path}: line {line_no}: {e}") from e
    except Exception as e:
        logger.error(f"Error reading {path}: {e}")
        raise


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence], append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(header)
        writer.writerows(rows)


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Render rows as an aligned plain-text table"""
    cells = [[str(h) for h in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cycle_edges(coords: np.ndarray, order: Sequence[int]) -> List[Edge]:
    """Edges of a closed tour through `order`"""
    pts = [tuple(map(float, coords[v])) for v in order]
    return [(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts))]


def routes_edges(coords: np.ndarray, routes: Sequence[Sequence[int]]) -> List[Edge]:
    """Edges of depot-anchored routes; node 0 is the depot"""
    edges: List[Edge] = []
    for route in routes:
        path = [0] + list(route) + [0]
        edges += [
            (tuple(map(float, coords[a])), tuple(map(float, coords[b])))
            for a, b in zip(path[:-1], path[1:])
        ]
    return edges


def _draw_panel(ax, coords: np.ndarray, edges: Sequence[Edge], highlight: Sequence[int] = (),
                fixed: Sequence[Edge] = (), title: Optional[str] = None, depot: bool = False) -> None:
    for i, (a, b) in enumerate(edges):
        ax.plot([a[0], b[0]], [a[1], b[1]], color="0.35", linewidth=0.8, gid=f"edge-{i}")
    for i, (a, b) in enumerate(fixed):
        ax.plot([a[0], b[0]], [a[1], b[1]], color="tab:blue", linewidth=1.6, gid=f"fixed-{i}")
    ax.scatter(coords[:, 0], coords[:, 1], s=8, color="black", zorder=3)
    if len(highlight):
        pts = coords[np.asarray(highlight)]
        ax.scatter(pts[:, 0], pts[:, 1], s=18, color="tab:red", zorder=4, gid="destroyed")
    if depot:
        ax.scatter(coords[:1, 0], coords[:1, 1], s=40, marker="s", color="tab:green", zorder=5)
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])


def _save_svg(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
        return path
    except Exception as e:
        logger.error(f"Error saving drawing {path}: {e}")
        raise
    finally:
        _pyplot().close(fig)


def draw_solution(path: PathLike, coords: np.ndarray, edges: Sequence[Edge],
                  title: Optional[str] = None, depot: bool = False) -> Path:
    """Draw nodes and solution edges to an SVG file"""
    fig, ax = _pyplot().subplots(figsize=(5, 5))
    _draw_panel(ax, np.asarray(coords), edges, title=title, depot=depot)
    return _save_svg(fig, path)


def draw_panels(path: PathLike, coords: np.ndarray, panels: Sequence[dict], depot: bool = False) -> Path:
    """
    Draw a row of destroy-and-repair panels to one SVG file.

    Each panel dict carries `edges`, and optionally `destroyed` node indices,
    `fixed` segment edges and a `title`.
    """
    coords = np.asarray(coords)
    fig, axes = _pyplot().subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
    for i, (ax, panel) in enumerate(zip(axes[0], panels)):
        ax.set_gid(f"panel-{i}")
        _draw_panel(
            ax, coords, panel.get("edges", ()),
            highlight=panel.get("destroyed", ()),
            fixed=panel.get("fixed", ()),
            title=panel.get("title"),
            depot=depot,
        )
    return _save_svg(fig, path)
