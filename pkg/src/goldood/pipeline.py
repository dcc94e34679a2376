"""Alternating adversarial training of GOLD, plus the baseline trainers.

One GOLD round:

1. freeze the GCN, take hidden embeddings ``H`` of the training nodes and
   fit the latent generator on them for ``M1`` epochs;
2. sample a pseudo-OOD batch once, freeze the generator, and train GCN and
   detector for up to ``M2`` epochs on the divergence objective of
   :func:`~goldood.objectives.loss_div_total`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, NonFiniteError
from .generators import generator_loss, make_generator, sample_pseudo_ood
from .graph import propagation_matrix, sym_normalize
from .models import DetectorMlp, GcnModel, GoldModel, detector_forward, embed, gcn_forward, gcn_head_on_embeddings
from .numerics import Tape, adam_step, backward
from .objectives import DREG_MODES, EnergyBundle, LossWeights, Margins, energy_node, loss_cls, loss_div_total, loss_ereg

log = logging.getLogger(__name__)

BASELINES = ("msp", "energy", "gnnsafe", "gnnsafe_pp")


class TrainingDivergence(NonFiniteError):
    pass


# dotted config key -> TrainConfig attribute
CONFIG_KEYS = {
    "seed": "seed",
    "train.rounds": "rounds",
    "train.M1": "M1",
    "train.M2": "M2",
    "train.warmup_epochs": "warmup_epochs",
    "train.baseline_epochs": "baseline_epochs",
    "train.lr_gnn": "lr_gnn",
    "train.lr_det": "lr_det",
    "train.lr_gen": "lr_gen",
    "train.delta_acc": "delta_acc",
    "train.n_pood": "n_pood",
    "prop.alpha": "alpha",
    "prop.k": "k",
    "gcn.hidden": "hidden",
    "gcn.layers": "layers",
    "detector.hidden": "det_hidden",
    "detector.layers": "det_layers",
    "margins.t_id": "t_id",
    "margins.t_ood": "t_ood",
    "weights.mu": "mu",
    "weights.lambda": "lam",
    "weights.gamma": "gamma",
    "weights.dreg_mode": "dreg_mode",
    "generator.kind": "generator",
    "ldm.T": "ldm_T",
    "ldm.beta1": "ldm_beta1",
    "ldm.betaT": "ldm_betaT",
    "ldm.hidden": "ldm_hidden",
    "ldm.layers": "ldm_layers",
    "ldm.time_embedding": "ldm_time_embedding",
    "vae.latent_dim": "vae_latent_dim",
    "vae.enc_hidden": "vae_enc_hidden",
    "vae.dec_hidden": "vae_dec_hidden",
    "vae.kl_weight": "vae_kl_weight",
}


@dataclass
class TrainConfig:
    seed: int = 0
    rounds: int = 10
    M1: int = 100
    M2: int = 10
    warmup_epochs: int = 0
    baseline_epochs: int = 0  # 0: warmup_epochs + rounds * M2
    lr_gnn: float = 1e-2
    lr_det: float = 1e-2
    lr_gen: float = 1e-3
    delta_acc: float = 5.0
    n_pood: int = 0  # 0: number of training nodes
    alpha: float = 0.5
    k: int = 2
    hidden: int = 64
    layers: int = 2
    det_hidden: int = 128
    det_layers: int = 2
    t_id: float = -4.0
    t_ood: float = 2.0
    mu: float = 1.0
    lam: float = 1.0
    gamma: float = 1.0
    dreg_mode: str = "hinge"
    generator: str = "ldm"
    ldm_T: int = 600
    ldm_beta1: float = 1e-4
    ldm_betaT: float = 0.02
    ldm_hidden: int = 128
    ldm_layers: int = 2
    ldm_time_embedding: str = "scalar"
    vae_latent_dim: int = 0  # 0: hidden // 2
    vae_enc_hidden: int = 512
    vae_dec_hidden: int = 256
    vae_kl_weight: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("rounds", "M1"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.layers < 2:
            raise ContractError("gcn.layers must be >= 2")
        if self.det_layers < 2 or self.ldm_layers < 2:
            raise ContractError("detector.layers and ldm.layers must be >= 2")
        for name in ("M2", "warmup_epochs", "baseline_epochs", "n_pood", "k", "vae_latent_dim"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("prop.alpha must lie in [0, 1]")
        for name in ("lr_gnn", "lr_det", "lr_gen"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")
        if self.dreg_mode not in DREG_MODES:
            raise ContractError(f"weights.dreg_mode must be one of {DREG_MODES}")
        if self.generator not in ("vae", "ldm"):
            raise ContractError("generator.kind must be 'vae' or 'ldm'")
        if self.ldm_time_embedding not in ("scalar", "sinusoidal"):
            raise ContractError("ldm.time_embedding must be 'scalar' or 'sinusoidal'")
        if not 0.0 < self.ldm_beta1 < self.ldm_betaT < 1.0:
            raise ContractError("need 0 < ldm.beta1 < ldm.betaT < 1")
        self.margins
        self.weights

    @property
    def margins(self):
        return Margins(self.t_id, self.t_ood)

    @property
    def weights(self):
        return LossWeights(self.mu, self.lam, self.gamma)

    def to_flat(self):
        return {key: getattr(self, attr) for key, attr in CONFIG_KEYS.items()}

    @classmethod
    def from_flat(cls, flat, base=None):
        """Build from dotted keys; unknown keys are rejected, values coerced."""
        kw = asdict(base) if base is not None else {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in flat.items():
            if key not in CONFIG_KEYS:
                raise ContractError(f"unknown config key {key!r}")
            attr = CONFIG_KEYS[key]
            kw[attr] = _coerce(key, value, types[attr])
        return cls(**kw)

    def digest(self):
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(key, value, typ):
    try:
        if typ in ("int", int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if typ in ("float", float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ContractError(f"config key {key!r}: cannot use {value!r} as {typ}") from None


@dataclass
class RoundRecord:
    round: int
    gen_loss: list[float] = field(default_factory=list)
    step2: list[dict[str, float]] = field(default_factory=list)
    epochs_run: int = 0
    early_stopped: bool = False
    train_acc: float = 0.0
    valid_acc: float = 0.0
    mean_e_id: float = 0.0
    mean_e_pood: float = 0.0
    mean_e_prime_id: float = 0.0
    mean_e_prime_pood: float = 0.0


@dataclass
class TrainHistory:
    rounds: list[RoundRecord] = field(default_factory=list)

    def to_json(self):
        return [asdict(r) for r in self.rounds]


def extract_embeddings(model, g, a_hat=None):
    """Hidden embeddings of the training nodes, detached from any tape."""
    H, _ = embed(model, g, a_hat)
    return H[g.masks["train"]].copy()


def _train_labels(g):
    if "train" not in g.masks or g.masks["train"].size == 0:
        raise ContractError("graph has no training nodes")
    train = g.masks["train"]
    labels = g.labels[train]
    if (labels < 0).any():
        raise ContractError("every training node needs a label")
    return train, labels


def _accuracy(Z, idx, labels):
    if idx.size == 0:
        return float("nan")
    return 100.0 * float(np.mean(np.argmax(Z[idx], axis=1) == labels[idx]))


def _cls_step(gcn, g, a_hat, train, labels, lr):
    tape = Tape()
    _, Z = gcn_forward(g, a_hat, gcn, tape)
    loss = loss_cls(tape, tape.gather_rows(Z, train), labels)
    adam_step(gcn.store, backward(tape, loss, gcn.store), lr)
    return tape.item(loss)


def _guard(fn, where):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingDivergence(f"non-finite value during {where}: {exc}") from exc


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(5)]


def build_generator(cfg, dim, rng):
    if cfg.generator == "vae":
        return make_generator(
            "vae", dim, rng,
            latent=cfg.vae_latent_dim or None,
            enc_hidden=cfg.vae_enc_hidden,
            dec_hidden=cfg.vae_dec_hidden,
            kl_weight=cfg.vae_kl_weight,
        )
    return make_generator(
        "ldm", dim, rng,
        T=cfg.ldm_T,
        beta1=cfg.ldm_beta1,
        betaT=cfg.ldm_betaT,
        hidden=cfg.ldm_hidden,
        layers=cfg.ldm_layers,
        time_embedding=cfg.ldm_time_embedding,
    )


def divergence_forward(g, a_hat, prop, gcn, det, h_pood, train, tape):
    """Forward pass for Step 2; returns ``(Z, bundle, logits_id, logits_pood)`` nodes."""
    _, Z = gcn_forward(g, a_hat, gcn, tape)
    e = energy_node(tape, Z)
    for _ in range(prop[1]):
        e = tape.spmm(prop[0], e)
    e_id = tape.gather_rows(e, train)
    e_pood = energy_node(tape, gcn_head_on_embeddings(h_pood, gcn, tape))
    logits_id = detector_forward(e_id, det, tape)
    logits_pood = detector_forward(e_pood, det, tape)
    bundle = EnergyBundle(e_id, e_pood, energy_node(tape, logits_id), energy_node(tape, logits_pood))
    return Z, bundle, logits_id, logits_pood


def train_gold(g, cfg, callback=None):
    """Run ``cfg.rounds`` rounds of the alternating optimisation.

    ``callback(event, round_index, stores)`` fires at ``"step1_start"``,
    ``"step1_end"``, ``"step2_start"`` and ``"step2_end"``; ``stores`` maps
    ``"gcn"``, ``"detector"`` and ``"generator"`` to their live ParamStores.
    Returns ``(GoldModel, generator, TrainHistory)``.
    """
    train, labels = _train_labels(g)
    valid = g.masks.get("valid", np.zeros(0, dtype=np.int64))
    valid = valid[g.labels[valid] >= 0]
    rng_gcn, rng_det, rng_gen_init, rng_gen, rng_sample = _streams(cfg.seed)
    gcn = GcnModel.init(g.num_features, cfg.hidden, g.num_classes, cfg.layers, rng_gcn)
    det = DetectorMlp.init(cfg.det_hidden, cfg.det_layers, rng_det)
    gen = build_generator(cfg, cfg.hidden, rng_gen_init)
    a_hat = sym_normalize(g)
    prop = (propagation_matrix(g, cfg.alpha), cfg.k)
    m = cfg.n_pood or train.size
    stores = {"gcn": gcn.store, "detector": det.store, "generator": gen.store}
    notify = callback or (lambda *a: None)

    for _ in range(cfg.warmup_epochs):
        _guard(lambda: _cls_step(gcn, g, a_hat, train, labels, cfg.lr_gnn), "warm-up")

    history = TrainHistory()
    best_acc = -np.inf
    for r in range(cfg.rounds):
        rec = RoundRecord(r)
        H = extract_embeddings(gcn, g, a_hat)

        notify("step1_start", r, stores)
        for _ in range(cfg.M1):
            tape = Tape()
            loss = _guard(lambda: generator_loss(H, gen, tape, rng_gen), f"round {r} step 1")
            adam_step(gen.store, backward(tape, loss, gen.store), cfg.lr_gen)
            rec.gen_loss.append(tape.item(loss))
        notify("step1_end", r, stores)

        h_pood = sample_pseudo_ood(gen, m, rng_sample)
        if not np.isfinite(h_pood).all():
            raise TrainingDivergence(f"round {r}: generator produced non-finite samples")

        notify("step2_start", r, stores)
        for epoch in range(cfg.M2):
            tape = Tape()

            def forward():
                Z, bundle, l_id, l_pood = divergence_forward(g, a_hat, prop, gcn, det, h_pood, train, tape)
                z_train = tape.gather_rows(Z, train)
                total, parts = loss_div_total(tape, bundle, l_id, l_pood, z_train, labels, cfg.weights, cfg.margins, cfg.dreg_mode)
                return Z, total, parts

            Z, total, parts = _guard(forward, f"round {r} step 2 epoch {epoch}")
            acc_idx = valid if valid.size else train
            acc = _accuracy(tape.value(Z), acc_idx, g.labels)
            best_acc = max(best_acc, acc)
            rec.step2.append({"total": tape.item(total), **{k: tape.item(v) for k, v in parts.items()}, "acc": acc})
            if acc < best_acc - cfg.delta_acc:
                rec.early_stopped = True
                log.info("round %d: accuracy %.2f fell below best %.2f, stopping step 2", r, acc, best_acc)
                break
            grads = backward(tape, total)
            adam_step(gcn.store, {k: grads[k] for k in gcn.store.names()}, cfg.lr_gnn)
            adam_step(det.store, {k: grads[k] for k in det.store.names()}, cfg.lr_det)
            rec.epochs_run += 1
        notify("step2_end", r, stores)

        _fill_round_stats(rec, g, a_hat, prop, gcn, det, h_pood, train, valid)
        history.rounds.append(rec)
        log.info(
            "round %d: gen %.4f, train acc %.1f, e' id %.3f, e' p-ood %.3f",
            r, rec.gen_loss[-1], rec.train_acc, rec.mean_e_prime_id, rec.mean_e_prime_pood,
        )

    return GoldModel(gcn, det, "gold"), gen, history


def _fill_round_stats(rec, g, a_hat, prop, gcn, det, h_pood, train, valid):
    tape = Tape()
    Z, bundle, _, _ = _guard(lambda: divergence_forward(g, a_hat, prop, gcn, det, h_pood, train, tape), "round statistics")
    Zv = tape.value(Z)
    rec.train_acc = _accuracy(Zv, train, g.labels)
    rec.valid_acc = _accuracy(Zv, valid, g.labels)
    rec.mean_e_id = float(tape.value(bundle.e_id).mean())
    rec.mean_e_pood = float(tape.value(bundle.e_pood).mean())
    rec.mean_e_prime_id = float(tape.value(bundle.e_prime_id).mean())
    rec.mean_e_prime_pood = float(tape.value(bundle.e_prime_pood).mean())


def train_baseline(g, kind, cfg, exposure=None):
    """Train the GCN for a baseline; only ``gnnsafe_pp`` uses real OOD exposure.

    ``exposure`` is an :class:`~goldood.data.OodSet` whose masked nodes act
    as the exposed OOD population.
    """
    if kind not in BASELINES:
        raise ContractError(f"unknown baseline {kind!r}")
    if kind == "gnnsafe_pp" and exposure is None:
        raise ContractError("gnnsafe_pp needs exposure data")
    if kind != "gnnsafe_pp" and exposure is not None:
        raise ContractError(f"{kind} does not take exposure data")
    train, labels = _train_labels(g)
    rng_gcn = _streams(cfg.seed)[0]
    gcn = GcnModel.init(g.num_features, cfg.hidden, g.num_classes, cfg.layers, rng_gcn)
    a_hat = sym_normalize(g)
    epochs = cfg.baseline_epochs or cfg.warmup_epochs + cfg.rounds * cfg.M2

    if kind != "gnnsafe_pp":
        for epoch in range(epochs):
            _guard(lambda: _cls_step(gcn, g, a_hat, train, labels, cfg.lr_gnn), f"{kind} epoch {epoch}")
        return GoldModel(gcn, None, kind)

    prop = propagation_matrix(g, cfg.alpha)
    og = exposure.graph
    o_hat = sym_normalize(og)
    o_prop = propagation_matrix(og, cfg.alpha)
    for epoch in range(epochs):
        tape = Tape()

        def forward():
            _, Z = gcn_forward(g, a_hat, gcn, tape)
            _, Zo = gcn_forward(og, o_hat, gcn, tape)
            e, eo = energy_node(tape, Z), energy_node(tape, Zo)
            for _ in range(cfg.k):
                e = tape.spmm(prop, e)
                eo = tape.spmm(o_prop, eo)
            reg = loss_ereg(tape, tape.gather_rows(e, train), tape.gather_rows(eo, exposure.mask), cfg.margins)
            cls = loss_cls(tape, tape.gather_rows(Z, train), labels)
            return tape.add(cls, tape.scale(reg, cfg.mu))

        loss = _guard(forward, f"gnnsafe_pp epoch {epoch}")
        adam_step(gcn.store, backward(tape, loss, gcn.store), cfg.lr_gnn)
    return GoldModel(gcn, None, kind)


def write_manifest(out_dir, cfg, method, history=None, wall_clock=None, extra=None):
    """Run manifest; ``timing`` is the only field that varies between identical runs."""
    manifest = {
        "method": method,
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "config_hash": cfg.digest(),
        "history": history.to_json() if history is not None else [],
        "timing": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "wall_clock_seconds": wall_clock},
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
