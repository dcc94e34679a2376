"""Energies and training losses.

Every loss here is written in the form that gets *minimised*, except
:func:`loss_dreg`, which :func:`loss_div_total` subtracts when ascending.
Convention throughout: low energy means in-distribution, high means OOD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import logsumexp_rows


@dataclass(frozen=True)
class Margins:
    t_id: float = -4.0
    t_ood: float = 2.0

    def __post_init__(self):
        if not self.t_id < self.t_ood:
            raise ContractError(f"need t_id < t_ood, got {self.t_id} >= {self.t_ood}")


@dataclass(frozen=True)
class LossWeights:
    mu: float = 1.0
    lam: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("mu", "lam", "gamma"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")


@dataclass
class EnergyBundle:
    """Tape nodes for the four energy columns used by the detector losses."""

    e_id: int
    e_pood: int
    e_prime_id: int | None = None
    e_prime_pood: int | None = None


def energy_score(Z):
    """``e_i = -log sum_c exp(z_ic)`` as a flat vector."""
    return -logsumexp_rows(Z).ravel()


def transformed_energy(logits):
    """Energy of the detector's two logits, ``-logsumexp(l0, l1)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ContractError(f"expected (m, 2) detector logits, got shape {logits.shape}")
    return -logsumexp_rows(logits).ravel()


def energy_node(tape, z):
    return tape.neg(tape.logsumexp_rows(z))


def _nonempty(tape, node, what):
    if tape.value(node).shape[0] == 0:
        raise ContractError(f"{what} is empty")


def loss_cls(tape, z_train, labels):
    """Mean softmax cross-entropy of ``z_train`` rows against ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if (labels < 0).any():
        raise ContractError("a training row has no label")
    _nonempty(tape, z_train, "training logits")
    nll = tape.sub(tape.logsumexp_rows(z_train), tape.pick(z_train, labels))
    return tape.mean(nll)


def loss_ereg(tape, e_id, e_pood, margins):
    """Squared hinges pushing ID energy below ``t_id`` and p-OOD above ``t_ood``."""
    _nonempty(tape, e_id, "ID energies")
    _nonempty(tape, e_pood, "p-OOD energies")
    over = tape.relu(tape.sub(e_id, tape.const(margins.t_id)))
    under = tape.relu(tape.sub(tape.const(margins.t_ood), e_pood))
    return tape.add(tape.mean(tape.square(over)), tape.mean(tape.square(under)))


def loss_unc(tape, logits_id, logits_pood):
    """Binary NLL: ID rows should pick logit 0, p-OOD rows logit 1."""
    _nonempty(tape, logits_id, "ID logits")
    _nonempty(tape, logits_pood, "p-OOD logits")
    m_id = tape.value(logits_id).shape[0]
    m_pood = tape.value(logits_pood).shape[0]
    nll_id = tape.sub(tape.logsumexp_rows(logits_id), tape.pick(logits_id, np.zeros(m_id, dtype=np.int64)))
    nll_pood = tape.sub(tape.logsumexp_rows(logits_pood), tape.pick(logits_pood, np.ones(m_pood, dtype=np.int64)))
    return tape.add(tape.mean(nll_id), tape.mean(nll_pood))


def loss_dreg(tape, e_id, e_prime_id, e_pood, e_prime_pood):
    """Divergence term: large when ``e'`` sits below ``e`` on ID and above it on p-OOD."""
    for a, b, what in ((e_id, e_prime_id, "ID"), (e_pood, e_prime_pood, "p-OOD")):
        if tape.value(a).shape != tape.value(b).shape:
            raise ContractError(f"{what} energies and transformed energies differ in length")
        _nonempty(tape, a, f"{what} energies")
    gap_id = tape.relu(tape.sub(e_id, e_prime_id))
    gap_pood = tape.relu(tape.sub(e_prime_pood, e_pood))
    return tape.add(tape.mean(tape.square(gap_id)), tape.mean(tape.square(gap_pood)))


def loss_dreg_hinge(tape, e_id, e_prime_id, e_pood, e_prime_pood):
    """Bounded, minimised divergence term.

    Penalises ``e'`` above ``e`` on ID rows and below ``e`` on p-OOD rows, so
    the detector is held to be at least as separating as the raw energy but
    is never rewarded without limit. Same shape checks as :func:`loss_dreg`.
    """
    return loss_dreg(tape, e_prime_id, e_id, e_prime_pood, e_pood)


DREG_MODES = ("hinge", "ascent")


def loss_div_total(tape, bundle, logits_id, logits_pood, z_train, labels, weights, margins, dreg_mode="hinge"):
    """Step-2 objective and its components.

    ``dreg_mode="ascent"`` gives ``L_CLS + mu L_EReg + lam L_Unc - gamma L_DReg``
    with :func:`loss_dreg`; ``"hinge"`` adds ``gamma`` times
    :func:`loss_dreg_hinge` instead. Returns ``(total_node, parts)`` where
    ``parts`` maps component names to their scalar nodes. Zero-weighted
    components are still evaluated so the history always has every column.
    """
    if dreg_mode not in DREG_MODES:
        raise ContractError(f"unknown dreg mode {dreg_mode!r}, expected one of {DREG_MODES}")
    dreg = loss_dreg if dreg_mode == "ascent" else loss_dreg_hinge
    parts = {
        "cls": loss_cls(tape, z_train, labels),
        "ereg": loss_ereg(tape, bundle.e_id, bundle.e_pood, margins),
        "unc": loss_unc(tape, logits_id, logits_pood),
        "dreg": dreg(tape, bundle.e_id, bundle.e_prime_id, bundle.e_pood, bundle.e_prime_pood),
    }
    total = parts["cls"]
    if weights.mu:
        total = tape.add(total, tape.scale(parts["ereg"], weights.mu))
    if weights.lam:
        total = tape.add(total, tape.scale(parts["unc"], weights.lam))
    if weights.gamma:
        combine = tape.sub if dreg_mode == "ascent" else tape.add
        total = combine(total, tape.scale(parts["dreg"], weights.gamma))
    return total, parts
