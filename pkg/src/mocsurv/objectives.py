"""Ratio contrast losses and the Cox partial-likelihood baseline.

Slot convention for the ratio losses: slot A is the numerator and slot B the
denominator.  Minimizing ``r_A / r_B`` lowers A and raises B, so the trainer
places the lower-risk (longer-lived) member of a pair in slot A and the
higher-risk member in slot B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node

CLAMP_LO = 1e-6
CLAMP_HI = 1.0 - 1e-6

MOC_TERMS = ("pA/pB", "pA/gB", "gA/pB", "gA/gB", "fused")
INTRA_TERMS = ("pA/pB", "gA/gB")


@dataclass
class PairPredictions:
    p_A: float
    g_A: float
    p_B: float
    g_B: float

    def __post_init__(self):
        for name in ("p_A", "g_A", "p_B", "g_B"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} outside (0, 1)")


@dataclass
class LossValue:
    loss: float
    terms: dict[str, float]


def _check_unit(name, v):
    if not 0.0 < v < 1.0:
        raise ValueError(f"{name}={v} outside (0, 1)")


def oc_loss(r_A: float, r_B: float) -> float:
    _check_unit("r_A", r_A)
    _check_unit("r_B", r_B)
    return r_A / r_B


def oc_output_grads(r_A: float, r_B: float) -> tuple[float, float]:
    """Closed-form gradients of r_A/r_B w.r.t. the pre-sigmoid outputs of each member."""
    ratio = r_A / r_B
    return ratio * (1.0 - r_A), -ratio * (1.0 - r_B)


def moc_loss(pp: PairPredictions) -> LossValue:
    terms = dict(zip(MOC_TERMS, (
        pp.p_A / pp.p_B,
        pp.p_A / pp.g_B,
        pp.g_A / pp.p_B,
        pp.g_A / pp.g_B,
        (pp.p_A + pp.g_A) / (pp.p_B + pp.g_B),
    )))
    return LossValue(sum(terms.values()), terms)


def intra_modal_loss(pp: PairPredictions) -> LossValue:
    """Same-modality terms only (cross-modal and fused terms dropped)."""
    terms = {"pA/pB": pp.p_A / pp.p_B, "gA/gB": pp.g_A / pp.g_B}
    return LossValue(sum(terms.values()), terms)


def cox_npll(scores, records) -> float:
    """Negative log partial likelihood with Breslow ties (risk set t_j >= t_i)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(s) != len(records):
        raise ValueError("scores and records must align")
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=bool)
    if not e.any():
        raise ValueError("partial likelihood undefined without uncensored samples")
    total = 0.0
    for i in np.flatnonzero(e):
        risk = s[t >= t[i]]
        m = risk.max()
        total -= s[i] - (m + np.log(np.exp(risk - m).sum()))
    return float(total)


# ---------------------------------------------------------------------------
# graph builders used by the trainer


def _guard(g: Graph, x: Node) -> Node:
    return g.clamp(x, CLAMP_LO, CLAMP_HI)


def ratio_loss_graph(g: Graph, preds: dict[str, Node], mode: str) -> dict[str, Node]:
    """Add per-term loss nodes (each summed over the batch) for ``mode``.

    ``preds`` maps ``pA``, ``gA``, ``pB``, ``gB`` to (batch, 1) probability
    nodes; only the ones the mode needs must be present.
    """
    q = {k: _guard(g, v) for k, v in preds.items()}
    if mode == "moc":
        terms = {
            "pA/pB": g.ratio(q["pA"], q["pB"]),
            "pA/gB": g.ratio(q["pA"], q["gB"]),
            "gA/pB": g.ratio(q["gA"], q["pB"]),
            "gA/gB": g.ratio(q["gA"], q["gB"]),
            "fused": g.ratio(g.add(q["pA"], q["gA"]), g.add(q["pB"], q["gB"])),
        }
    elif mode == "intra_only":
        terms = {"pA/pB": g.ratio(q["pA"], q["pB"]), "gA/gB": g.ratio(q["gA"], q["gB"])}
    elif mode == "oc_unimodal_path":
        terms = {"pA/pB": g.ratio(q["pA"], q["pB"])}
    elif mode == "oc_unimodal_gene":
        terms = {"gA/gB": g.ratio(q["gA"], q["gB"])}
    else:
        raise ValueError(f"unknown ratio loss mode {mode!r}")
    return {k: g.sum(v, name="term:" + k) for k, v in terms.items()}


def total(g: Graph, nodes) -> Node:
    nodes = list(nodes)
    out = nodes[0]
    for n in nodes[1:]:
        out = g.add(out, n)
    return out
