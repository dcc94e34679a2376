"""GCN backbone, the energy detector MLP, and checkpoint archives."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError
from .graph import sym_normalize
from .numerics import ParamStore, Tape

DETECTOR_WIDTHS = (128, 256, 512)


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GcnModel:
    """``layers`` bias-free GCN layers: ``in_dim -> hidden -> ... -> num_classes``."""

    in_dim: int
    hidden: int
    num_classes: int
    layers: int = 2
    store: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def init(cls, in_dim, hidden, num_classes, layers=2, rng=None):
        if layers < 2:
            raise ContractError("a GCN needs at least 2 layers to expose hidden embeddings")
        rng = np.random.default_rng(rng)
        model = cls(in_dim, hidden, num_classes, layers)
        dims = model.dims
        for l in range(layers):
            model.store.add(f"gcn.W{l + 1}", glorot(rng, dims[l], dims[l + 1]))
        return model

    @property
    def dims(self):
        return [self.in_dim] + [self.hidden] * (self.layers - 1) + [self.num_classes]

    def weight(self, l):
        return f"gcn.W{l}"


@dataclass
class DetectorMlp:
    """Affine+ReLU stack mapping a scalar energy to (ID, OOD) logits."""

    hidden: int = 128
    layers: int = 2
    store: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def init(cls, hidden=128, layers=2, rng=None):
        if layers < 2:
            raise ContractError("detector needs at least 2 affine layers")
        rng = np.random.default_rng(rng)
        mlp = cls(hidden, layers)
        dims = mlp.dims
        for l in range(layers):
            mlp.store.add(f"det.W{l + 1}", glorot(rng, dims[l], dims[l + 1]))
            mlp.store.add(f"det.b{l + 1}", np.zeros((1, dims[l + 1])))
        return mlp

    @property
    def dims(self):
        return [1] + [self.hidden] * (self.layers - 1) + [2]


@dataclass
class GoldModel:
    """A trained classifier plus, for GOLD runs, the detector."""

    gcn: GcnModel
    detector: DetectorMlp | None = None
    method: str = "gold"


def _gcn_params(tape, model):
    return {name: tape.param(name, value) for name, value in model.store.params.items()}


def gcn_forward(g, a_hat, model, tape, features=None):
    """Run the GCN and return tape nodes ``(H, Z)``.

    ``H`` is the post-ReLU output of layer ``L - 1``; ``Z`` the logits of
    layer ``L``. ``a_hat`` must be :func:`~goldood.graph.sym_normalize` of
    ``g``. ``features`` overrides ``g.features`` when given.
    """
    X = g.features if features is None else features
    if X.shape[1] != model.in_dim:
        raise DimensionError(f"graph has {X.shape[1]} features, model expects {model.in_dim}")
    if a_hat.shape != (X.shape[0], X.shape[0]):
        raise DimensionError(f"adjacency {a_hat.shape} does not match {X.shape[0]} nodes")
    p = _gcn_params(tape, model)
    # A X is constant, so aggregate features before the first weight
    H = tape.relu(tape.matmul(tape.spmm(a_hat, tape.const(X)), p[model.weight(1)]))
    for l in range(2, model.layers):
        H = tape.relu(tape.spmm(a_hat, tape.matmul(H, p[model.weight(l)])))
    Z = tape.spmm(a_hat, tape.matmul(H, p[model.weight(model.layers)]))
    return H, Z


def gcn_head_on_embeddings(h_pood, model, tape):
    """Last GCN layer with identity adjacency: ``Z = Hp W^(L)``."""
    p = _gcn_params(tape, model)
    if not isinstance(h_pood, (int, np.integer)):
        h_pood = tape.const(h_pood)
    return tape.matmul(h_pood, p[model.weight(model.layers)])


def detector_forward(e, mlp, tape):
    """Per-row (ID, OOD) logits for a column of energies (node or array)."""
    if not isinstance(e, (int, np.integer)):
        e = tape.const(np.asarray(e, dtype=np.float64).reshape(-1, 1))
    if tape.value(e).shape[1] != 1:
        raise DimensionError("detector input must be a single energy column")
    p = {name: tape.param(name, value) for name, value in mlp.store.params.items()}
    x = e
    for l in range(1, mlp.layers + 1):
        x = tape.add(tape.matmul(x, p[f"det.W{l}"]), p[f"det.b{l}"])
        if l < mlp.layers:
            x = tape.relu(x)
    return x


def embed(model, g, a_hat=None):
    """Numpy ``(H, Z)`` for the whole graph, no gradient bookkeeping."""
    if a_hat is None:
        a_hat = sym_normalize(g)
    tape = Tape()
    H, Z = gcn_forward(g, a_hat, model, tape)
    return tape.value(H), tape.value(Z)


# checkpoints

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path, params):
    """Write ``name -> float64 array`` as a zip of ``.npy`` members.

    Member timestamps are pinned so identical parameters give identical
    bytes. The result loads with ``numpy.load``.
    """
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params[name], dtype=np.float64))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return path


def load_archive(path):
    with np.load(path, allow_pickle=False) as data:
        return {name: np.array(data[name]) for name in data.files}


def save_checkpoint(out_dir, stores, meta):
    """Write ``checkpoint.npz`` and ``checkpoint.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = {}
    for store in stores:
        for name, value in store.params.items():
            if name in params:
                raise ContractError(f"duplicate parameter name {name!r}")
            params[name] = value
    save_archive(out_dir / "checkpoint.npz", params)
    (out_dir / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir


def load_checkpoint(out_dir):
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "checkpoint.json").read_text())
    return load_archive(out_dir / "checkpoint.npz"), meta


def store_from(params, prefix):
    store = ParamStore()
    for name in sorted(params, key=_param_order):
        if name.startswith(prefix):
            store.add(name, params[name])
    return store


def _param_order(name):
    # keeps W2 after W1 and W10 after W9
    head, _, tail = name.rpartition(".")
    digits = "".join(ch for ch in tail if ch.isdigit())
    return (head, tail.rstrip("0123456789"), int(digits) if digits else -1)
