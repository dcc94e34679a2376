"""Dataset directories, synthetic OOD recipes and the SBM fixture.

Directory layout (UTF-8, LF line endings)::

    meta.json      {"num_nodes": n, "num_features": d, "num_classes": C}
    edges.tsv      one undirected edge per line: src<TAB>dst
    features.tsv   one node per line, TAB-separated decimals
    labels.tsv     one integer per line, -1 = unlabeled
    splits.json    named index arrays ("train", "valid", "test"; "ood" in OOD sets)
    ood/<name>/    an OOD set in the same layout; its splits.json holds "ood"
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataLoadError
from .graph import UNLABELED, Graph

REQUIRED_FILES = ("meta.json", "edges.tsv", "features.tsv", "labels.tsv", "splits.json")


@dataclass
class OodSet:
    graph: Graph
    mask: np.ndarray


@dataclass
class DatasetBundle:
    id_graph: Graph
    ood_sets: dict[str, OodSet] = field(default_factory=dict)


@dataclass(frozen=True)
class OodRecipe:
    kind: str
    seed: int = 0
    rewire_fraction: float = 1.0
    left_out: tuple[int, ...] = ()
    ignore: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("structure", "feature", "leaveout"):
            raise ContractError(f"unknown OOD recipe {self.kind!r}")


# loading / saving


def _lines(path):
    text = path.read_text(encoding="utf-8")
    return [line for line in text.split("\n")] if text else []


def _read_json(path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataLoadError(path, f"invalid JSON: {exc.msg}", exc.lineno) from None


def _load_graph(root):
    root = Path(root)
    for name in REQUIRED_FILES:
        if not (root / name).is_file():
            raise DataLoadError(root / name, "missing file")
    meta = _read_json(root / "meta.json")
    try:
        n, d, C = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])
    except (KeyError, TypeError, ValueError):
        raise DataLoadError(root / "meta.json", "needs integer num_nodes, num_features, num_classes") from None

    path = root / "features.tsv"
    rows = []
    for i, line in enumerate(_lines(path), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != d:
            raise DataLoadError(path, f"expected {d} values, found {len(parts)}", i)
        try:
            rows.append([float(x) for x in parts])
        except ValueError:
            raise DataLoadError(path, "non-numeric feature value", i) from None
    if len(rows) != n:
        raise DataLoadError(path, f"expected {n} rows, found {len(rows)}")
    features = np.array(rows, dtype=np.float64).reshape(n, d)
    if not np.isfinite(features).all():
        raise DataLoadError(path, "non-finite feature value")

    path = root / "labels.tsv"
    labels = []
    for i, line in enumerate(_lines(path), start=1):
        if not line:
            continue
        try:
            y = int(line)
        except ValueError:
            raise DataLoadError(path, f"label {line!r} is not an integer", i) from None
        if y < UNLABELED or y >= C:
            raise DataLoadError(path, f"label {y} outside [-1, {C})", i)
        labels.append(y)
    if len(labels) != n:
        raise DataLoadError(path, f"expected {n} labels, found {len(labels)}")

    path = root / "edges.tsv"
    edges = []
    for i, line in enumerate(_lines(path), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataLoadError(path, "expected src<TAB>dst", i)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataLoadError(path, "edge endpoints must be integers", i) from None
        if not (0 <= u < n and 0 <= v < n):
            raise DataLoadError(path, f"edge ({u}, {v}) has an endpoint outside [0, {n})", i)
        edges.append((u, v))

    path = root / "splits.json"
    splits = _read_json(path)
    if not isinstance(splits, dict):
        raise DataLoadError(path, "expected an object of named index arrays")
    masks = {}
    for name, idx in splits.items():
        arr = np.asarray(idx, dtype=np.int64).reshape(-1)
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise DataLoadError(path, f"split {name!r} has indices outside [0, {n})")
        masks[name] = arr
    return Graph.from_edges(features, edges, labels, C, masks)


def load_dataset(root):
    """Parse and validate a dataset directory into a :class:`DatasetBundle`."""
    root = Path(root)
    if not root.is_dir():
        raise DataLoadError(root, "dataset directory does not exist")
    bundle = DatasetBundle(_load_graph(root))
    ood_root = root / "ood"
    if ood_root.is_dir():
        for sub in sorted(p for p in ood_root.iterdir() if p.is_dir()):
            g = _load_graph(sub)
            if "ood" not in g.masks:
                raise DataLoadError(sub / "splits.json", "OOD set needs an 'ood' split")
            if g.num_features != bundle.id_graph.num_features:
                raise DataLoadError(sub / "meta.json", "feature dimension differs from the ID graph")
            bundle.ood_sets[sub.name] = OodSet(g, g.masks["ood"])
    return bundle


def _save_graph(g, root, masks):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": g.n, "num_features": g.num_features, "num_classes": g.num_classes}
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as f:
        for u, v in g.edges:
            f.write(f"{u}\t{v}\n")
    with open(root / "features.tsv", "w", encoding="utf-8", newline="\n") as f:
        for row in g.features:
            f.write("\t".join(repr(float(x)) for x in row) + "\n")
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as f:
        for y in g.labels:
            f.write(f"{int(y)}\n")
    splits = {name: [int(i) for i in idx] for name, idx in sorted(masks.items())}
    (root / "splits.json").write_text(json.dumps(splits, sort_keys=True) + "\n", encoding="utf-8")


def save_dataset(bundle, root):
    """Write ``bundle`` in the directory layout; replaces any existing ``ood/``."""
    root = Path(root)
    _save_graph(bundle.id_graph, root, bundle.id_graph.masks)
    ood_root = root / "ood"
    if ood_root.exists():
        shutil.rmtree(ood_root)
    for name, ood in bundle.ood_sets.items():
        masks = dict(ood.graph.masks)
        masks["ood"] = ood.mask
        _save_graph(ood.graph, ood_root / name, masks)
    return root


# recipes


def make_structure_ood(g, rewire_fraction, seed):
    """Resample ``rewire_fraction`` of the edges uniformly, keeping the count."""
    if not 0.0 < rewire_fraction <= 1.0:
        raise ContractError(f"rewire_fraction must lie in (0, 1], got {rewire_fraction}")
    rng = np.random.default_rng(seed)
    n, E = g.n, len(g.edges)
    if E > n * (n - 1) // 2:
        raise ContractError("graph has more edges than node pairs")
    n_new = int(round(rewire_fraction * E))
    drop = rng.choice(E, size=n_new, replace=False)
    keep = np.delete(g.edges, drop, axis=0)
    present = {(int(u), int(v)) for u, v in keep}
    added = []
    while len(added) < n_new:
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        pair = (int(min(u, v)), int(max(u, v)))
        if pair in present:
            continue
        present.add(pair)
        added.append(pair)
    edges = np.concatenate([keep, np.asarray(added, dtype=np.int64).reshape(-1, 2)])
    return g.replace(edges=edges)


def make_feature_ood(g, seed):
    """Replace each ``x_i`` with ``r x_i + (1 - r) x_j`` for a random other node ``j``."""
    if g.n < 2:
        raise ContractError("feature interpolation needs at least 2 nodes")
    rng = np.random.default_rng(seed)
    n = g.n
    j = rng.integers(0, n - 1, size=n)
    j = j + (j >= np.arange(n))
    r = rng.uniform(0.0, 1.0, size=(n, 1))
    X = g.features
    return g.replace(features=r * X + (1.0 - r) * X[j])


def random_split(idx, rng, train=0.4, valid=0.2):
    idx = np.asarray(idx, dtype=np.int64)
    perm = rng.permutation(idx)
    n_train = int(round(train * len(idx)))
    n_valid = int(round(valid * len(idx)))
    return {
        "train": np.sort(perm[:n_train]),
        "valid": np.sort(perm[n_train : n_train + n_valid]),
        "test": np.sort(perm[n_train + n_valid :]),
    }


def make_label_leaveout(g, left_out, seed, ignore=(), train=0.4, valid=0.2):
    """Hold out ``left_out`` classes as OOD over the unchanged graph.

    Kept classes are relabelled ``0..C'-1`` and split into train/valid/test;
    nodes of ``left_out`` form the OOD mask. Classes in ``ignore`` belong to
    neither side (used to mirror benchmark splits that drop a class).
    """
    left_out = sorted({int(c) for c in left_out})
    ignore = sorted({int(c) for c in ignore})
    classes = set(range(g.num_classes))
    if not left_out or not set(left_out) < classes:
        raise ContractError("left-out classes must be a proper subset of the classes")
    if set(ignore) & set(left_out):
        raise ContractError("a class cannot be both left out and ignored")
    kept = sorted(classes - set(left_out) - set(ignore))
    if not kept:
        raise ContractError("left-out classes must be a proper subset of the classes")
    remap = np.full(g.num_classes, UNLABELED, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    labels = np.where(g.labels >= 0, remap[np.maximum(g.labels, 0)], UNLABELED)
    id_nodes = np.flatnonzero(np.isin(g.labels, kept))
    ood_nodes = np.flatnonzero(np.isin(g.labels, left_out))
    rng = np.random.default_rng(seed)
    masks = random_split(id_nodes, rng, train, valid)
    id_graph = g.replace(labels=labels, num_classes=len(kept), masks=masks)
    ood_graph = id_graph.replace(masks={})
    return DatasetBundle(id_graph, {"leaveout": OodSet(ood_graph, ood_nodes)})


def make_sbm_toy(n_per_class, p_in, p_out, d, class_count, seed, feature_sep=1.0, noise=1.0, train=0.4, valid=0.2):
    """Stochastic block model with Gaussian class-conditional features.

    Class ``c`` has mean ``feature_sep / sqrt(2) * e_(c mod d)``, so distinct
    class means sit ``feature_sep`` apart. Masks are a seeded random split.
    """
    if not p_in > p_out:
        raise ContractError("need p_in > p_out")
    rng = np.random.default_rng(seed)
    n = n_per_class * class_count
    labels = np.repeat(np.arange(class_count), n_per_class)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.uniform(size=prob.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    means = np.zeros((class_count, d))
    means[np.arange(class_count), np.arange(class_count) % d] = feature_sep / np.sqrt(2.0)
    features = means[labels] + noise * rng.standard_normal((n, d))
    masks = random_split(np.arange(n), rng, train, valid)
    return Graph.from_edges(features, edges, labels, class_count, masks)


def apply_recipe(bundle, recipe, name=None):
    """Return a new bundle with the recipe's OOD set added (leaveout rebuilds the ID side)."""
    g = bundle.id_graph
    if recipe.kind == "leaveout":
        out = make_label_leaveout(g, recipe.left_out, recipe.seed, recipe.ignore)
        if name and name != "leaveout":
            out.ood_sets = {name: out.ood_sets.pop("leaveout")}
        return out
    if recipe.kind == "structure":
        ood = make_structure_ood(g, recipe.rewire_fraction, recipe.seed)
    else:
        ood = make_feature_ood(g, recipe.seed)
    sets = dict(bundle.ood_sets)
    sets[name or recipe.kind] = OodSet(ood.replace(masks={}), np.arange(g.n))
    return DatasetBundle(g, sets)
