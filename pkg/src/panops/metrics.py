"""Segmentation metrics over a confusion matrix, plus taxonomy-based similarity.

The hard metric treats every misprediction as equally wrong. The open
variant credits a misprediction by how similar the predicted category is to
the true one, with similarity taken from a category taxonomy (or any
symmetric unit-diagonal matrix), so calling a "house" a "building" costs
less than calling it a "sky".
"""

from __future__ import annotations

import csv

import numpy as np

from .tensor import FormatError

# Ground-truth pixels with this id are left out of every count; predictions
# may never use it where the ground truth is counted.
IGNORE_ID = 255


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """Count (true category, predicted category) pairs over two label maps.

    Entry [g, p] is the number of pixels with ground truth g predicted as p.
    Ground-truth pixels equal to IGNORE_ID are skipped entirely.
    """
    if not (isinstance(num_classes, int) and 1 <= num_classes <= IGNORE_ID):
        raise ValueError(f"num_classes must be in [1, {IGNORE_ID}], got {num_classes}")
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if not (np.issubdtype(p.dtype, np.integer) and np.issubdtype(g.dtype, np.integer)):
        raise ValueError(f"label maps must be integer arrays, got {p.dtype} and {g.dtype}")

    mask = g != IGNORE_ID
    pv = p[mask].astype(np.int64)
    gv = g[mask].astype(np.int64)
    if pv.size:
        if gv.min() < 0 or pv.min() < 0:
            raise ValueError("label ids must be non-negative")
        if gv.max() >= num_classes:
            raise ValueError(f"ground-truth id {gv.max()} out of range for "
                             f"{num_classes} categories")
        if pv.max() >= num_classes:
            bad = int(pv.max())
            hint = " (the ignore id is reserved for ground truth)" if bad == IGNORE_ID else ""
            raise ValueError(f"prediction id {bad} out of range for "
                             f"{num_classes} categories{hint}")
    counts = np.bincount(gv * num_classes + pv, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def _check_confusion(matrix) -> np.ndarray:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ValueError(f"confusion matrix must be square, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.integer):
        raise ValueError(f"confusion matrix must hold integer counts, got {m.dtype}")
    if m.min() < 0:
        raise ValueError("confusion matrix counts must be non-negative")
    return m.astype(np.int64)


def _mean_present(per_category) -> float:
    present = ~np.isnan(per_category)
    if not present.any():
        raise ValueError("no categories present")
    return float(per_category[present].mean())


def miou(matrix) -> tuple[np.ndarray, float]:
    """Per-category intersection over union and its mean.

    Categories that never occur (zero union) get NaN and are left out of the
    mean; a matrix where nothing occurs at all is an error.
    """
    m = _check_confusion(matrix).astype(np.float64)
    inter = np.diag(m)
    union = m.sum(axis=1) + m.sum(axis=0) - inter
    iou = np.full(m.shape[0], np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return iou, _mean_present(iou)


def check_similarity(matrix, num_classes: int | None = None) -> np.ndarray:
    """Validate a category-similarity matrix: square, symmetric, unit diagonal,
    values in [0, 1]. Returns it as float64."""
    s = np.asarray(matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ValueError(f"similarity matrix must be square, got shape {s.shape}")
    if num_classes is not None and s.shape[0] != num_classes:
        raise ValueError(f"similarity matrix is {s.shape[0]}x{s.shape[0]}, "
                         f"expected {num_classes}x{num_classes}")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity values must be finite")
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("similarity values must lie in [0, 1]")
    if not np.array_equal(np.diag(s), np.ones(s.shape[0])):
        raise ValueError("similarity matrix must have a unit diagonal")
    if not np.array_equal(s, s.T):
        raise ValueError("similarity matrix must be symmetric")
    return s


def open_miou(matrix, similarity) -> tuple[np.ndarray, float]:
    """Per-category similarity-credited IoU and its mean.

    Off-diagonal confusion [g, p] contributes similarity[g, p] of its count
    to both categories' matched mass; the denominator is the plain union.
    Identity similarity reproduces miou exactly; all-ones similarity scores
    every present category 1. Same NaN treatment as miou.
    """
    m = _check_confusion(matrix).astype(np.float64)
    s = check_similarity(similarity, m.shape[0])
    inter = np.diag(m)
    union = m.sum(axis=1) + m.sum(axis=0) - inter
    weighted = s * m
    matched = weighted.sum(axis=1) + weighted.sum(axis=0) - inter
    oiou = np.full(m.shape[0], np.nan)
    present = union > 0
    oiou[present] = matched[present] / union[present]
    return oiou, _mean_present(oiou)


def metric_report(matrix, similarity=None) -> dict:
    """JSON-ready summary: miou, open_miou (when similarity given), per category."""
    m = _check_confusion(matrix)
    iou, mean_iou = miou(m)
    oiou = open_miou(m, similarity)[0] if similarity is not None else None
    per = []
    for i in range(m.shape[0]):
        row = {"index": i, "iou": None if np.isnan(iou[i]) else float(iou[i])}
        if oiou is not None:
            row["open_iou"] = None if np.isnan(oiou[i]) else float(oiou[i])
        per.append(row)
    report = {"num_classes": int(m.shape[0]), "miou": mean_iou, "per_category": per}
    if similarity is not None:
        report["open_miou"] = open_miou(m, similarity)[1]
    return report


class Taxonomy:
    """Category hierarchy: every node has one parent, a single root has none.

    Built from "child<TAB>parent" lines, the root marked by parent "-".
    Depth counts nodes from the root inclusive, so the root has depth 1.
    """

    def __init__(self, parent_of: dict[str, str | None]):
        roots = [n for n, p in parent_of.items() if p is None]
        if len(roots) != 1:
            raise FormatError(f"taxonomy must have exactly one root, found {len(roots)}")
        self.root = roots[0]
        self.parent_of = dict(parent_of)
        for name, parent in self.parent_of.items():
            if parent is not None and parent not in self.parent_of:
                raise FormatError(f"node {name!r} names unknown parent {parent!r}")
        self._depth = {}
        for name in self.parent_of:
            self.chain(name)  # walks to the root, raising on cycles

    def __contains__(self, name) -> bool:
        return name in self.parent_of

    def chain(self, name) -> list[str]:
        """Path from the root down to name, both inclusive."""
        if name not in self.parent_of:
            raise ValueError(f"unknown category {name!r}")
        path = []
        seen = set()
        node = name
        while node is not None:
            if node in seen:
                raise FormatError(f"taxonomy contains a cycle through {node!r}")
            seen.add(node)
            path.append(node)
            node = self.parent_of[node]
        path.reverse()
        self._depth[name] = len(path)
        return path

    def depth(self, name) -> int:
        if name not in self._depth:
            self.chain(name)
        return self._depth[name]

    @classmethod
    def from_lines(cls, lines) -> "Taxonomy":
        parent_of = {}
        for lineno, raw in enumerate(lines, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise FormatError(f"line {lineno}: expected 'child<TAB>parent', got {line!r}")
            child, parent = fields[0].strip(), fields[1].strip()
            if not child or not parent:
                raise FormatError(f"line {lineno}: empty field in {line!r}")
            if child in parent_of:
                raise FormatError(f"line {lineno}: duplicate entry for {child!r}")
            parent_of[child] = None if parent == "-" else parent
        if not parent_of:
            raise FormatError("taxonomy file has no entries")
        return cls(parent_of)

    @classmethod
    def load(cls, path) -> "Taxonomy":
        with open(path, encoding="utf-8") as f:
            return cls.from_lines(f)


def wup_similarity(taxonomy: Taxonomy, a: str, b: str) -> float:
    """Wu-Palmer similarity: 2 * depth(lca) / (depth(a) + depth(b)).

    The lowest common ancestor is the deepest node on both root paths. Two
    identical categories score 1; siblings right under the root of a
    3-level tree score 0.5.
    """
    ca = taxonomy.chain(a)
    cb = taxonomy.chain(b)
    lca_depth = 0
    for pa, pb in zip(ca, cb):
        if pa != pb:
            break
        lca_depth += 1
    return 2.0 * lca_depth / (len(ca) + len(cb))


def similarity_from_taxonomy(taxonomy: Taxonomy, names) -> np.ndarray:
    """Wu-Palmer similarity matrix for an ordered category list."""
    names = list(names)
    if not names:
        raise ValueError("need at least one category name")
    if len(set(names)) != len(names):
        raise ValueError("category names must be unique")
    n = len(names)
    s = np.eye(n, dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            s[i, j] = s[j, i] = wup_similarity(taxonomy, names[i], names[j])
    return check_similarity(s, n)


def save_similarity_csv(path, names, similarity) -> None:
    """Write names and a similarity matrix as CSV with a leading header row."""
    names = [str(n) for n in names]
    s = check_similarity(similarity, len(names))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([""] + names)
        for name, row in zip(names, s):
            writer.writerow([name] + [repr(float(v)) for v in row])


def load_similarity_csv(path) -> tuple[list[str], np.ndarray]:
    """Read back a similarity CSV; returns (names, matrix)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or len(rows[0]) < 2 or rows[0][0] != "":
        raise FormatError(f"{path}: first row must be an empty cell then category names")
    names = rows[0][1:]
    if len(rows) != len(names) + 1:
        raise FormatError(f"{path}: expected {len(names)} data rows, got {len(rows) - 1}")
    matrix = np.zeros((len(names), len(names)), dtype=np.float64)
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != len(names) + 1:
            raise FormatError(f"{path}: row {i + 1} has {len(row)} cells, "
                              f"expected {len(names) + 1}")
        if row[0] != names[i - 1]:
            raise FormatError(f"{path}: row {i + 1} is labeled {row[0]!r}, "
                              f"expected {names[i - 1]!r}")
        try:
            matrix[i - 1] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}: row {i + 1} has a non-numeric cell: {exc}") from None
    try:
        return names, check_similarity(matrix, len(names))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
