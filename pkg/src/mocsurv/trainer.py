"""Dual-predictor contrast training with copy/average parameter synchronization.

Each accumulation window of ``W = accumulation_forwards / 2`` pairs runs:

1. copy theta_Z into theta_A and theta_B;
2. forward every lower-risk member through P_A and every higher-risk member
   through P_B, summing loss gradients per side;
3. one optimizer step on theta_A and on theta_B (separate moment estimates);
4. theta_Z <- (theta_A + theta_B) / 2.

With ``W = 1`` this is the per-pair loop verbatim.  The window's pairs are
evaluated as one batch; since parameters are frozen inside a window this is
the same sum as sequential accumulation up to floating-point reassociation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import objectives
from .autodiff import Graph, GradStore, ParamSet
from .data import Cohort, ContrastPair
from .predictors import (
    CheckpointError,
    ModelDims,
    genomics_logit,
    init_params,
    member_inputs,
    pathology_logit,
    read_checkpoint,
    stack_members,
    write_checkpoint,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("moc", "intra_only", "oc_unimodal_path", "oc_unimodal_gene", "cox_baseline")


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block {block!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    accumulation_forwards: int = 128
    dropout_rate: float = 0.25
    epochs: int = 4
    seed: int = 1
    loss_mode: str = "moc"
    optimizer: str = "adam"  # "sgd" = plain gradient descent
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    swap_roles: bool = False  # put the higher-risk member in slot A instead

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.accumulation_forwards < 2 or self.accumulation_forwards % 2:
            raise ValueError("accumulation_forwards must be a positive even count")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    @property
    def window_pairs(self) -> int:
        return self.accumulation_forwards // 2

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: ParamSet
    v: ParamSet
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.step)


def adam_step(params: ParamSet, grads: GradStore, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamSet:
    """Bias-corrected Adam update.  Advances ``state`` in place, returns new params."""
    for name in params.names():
        if not np.isfinite(grads[name]).all():
            raise NonFiniteGradientError(name)
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    out = []
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += eps
        step = m / c1
        step /= denom
        step *= lr
        out.append((name, p - step))
    return ParamSet(out)


def sgd_step(params: ParamSet, grads: GradStore, lr: float) -> ParamSet:
    for name in params.names():
        if not np.isfinite(grads[name]).all():
            raise NonFiniteGradientError(name)
    return ParamSet((k, p - lr * grads[k]) for k, p in params.items())


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    theta_Z: ParamSet
    theta_A: ParamSet
    theta_B: ParamSet
    opt_A: OptimizerState
    opt_B: OptimizerState
    dims: ModelDims
    epoch: int = 0
    window: int = 0  # next window within ``epoch``
    windows_done: int = 0
    config: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, dims: ModelDims, cfg: TrainConfig) -> "TrainState":
        theta = init_params(cfg.seed, dims)
        return cls(theta, theta.copy(), theta.copy(), OptimizerState.zeros(theta),
                   OptimizerState.zeros(theta), dims, config=cfg.to_dict())

    def synchronized(self) -> bool:
        return self.theta_A.equals(self.theta_Z) and self.theta_B.equals(self.theta_Z)


_STATE_SECTIONS = ("theta_Z", "theta_A", "theta_B", "m_A", "v_A", "m_B", "v_B")


def save_checkpoint(state: TrainState, path) -> None:
    header = {
        "kind": "train_state",
        "dims": state.dims.to_dict(),
        "n_params": state.theta_Z.size,
        "epoch": state.epoch,
        "window": state.window,
        "windows_done": state.windows_done,
        "step_A": state.opt_A.step,
        "step_B": state.opt_B.step,
        "config": state.config,
    }
    arrays = (state.theta_Z, state.theta_A, state.theta_B,
              state.opt_A.m, state.opt_A.v, state.opt_B.m, state.opt_B.v)
    write_checkpoint(path, header, {k: a.flat() for k, a in zip(_STATE_SECTIONS, arrays)})


def load_checkpoint(path) -> TrainState:
    header, sections = read_checkpoint(path)
    if header.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a training-state checkpoint")
    missing = [s for s in _STATE_SECTIONS if s not in sections]
    if missing:
        raise CheckpointError(f"{path}: missing sections {missing}")
    dims = ModelDims.from_dict(header["dims"])
    template = init_params(0, dims)
    for s in _STATE_SECTIONS:
        if sections[s].size != template.size:
            raise CheckpointError(f"{path}: section {s} has {sections[s].size} values, expected {template.size}")
    p = {s: template.with_flat(sections[s]) for s in _STATE_SECTIONS}
    return TrainState(
        p["theta_Z"], p["theta_A"], p["theta_B"],
        OptimizerState(p["m_A"], p["v_A"], header["step_A"]),
        OptimizerState(p["m_B"], p["v_B"], header["step_B"]),
        dims, header["epoch"], header["window"], header["windows_done"], header.get("config", {}),
    )


# ---------------------------------------------------------------------------
# trainer


def _uses(mode: str) -> tuple[bool, bool]:
    """(pathology branch used, genomics branch used)."""
    return mode != "oc_unimodal_gene", mode != "oc_unimodal_path"


def build_pair_graph(dims: ModelDims, mode: str, dropout: float = 0.0):
    """Loss graph over one window: side A params/inputs prefixed ``A:``, side B ``B:``."""
    use_p, use_g = _uses(mode)
    g = Graph()
    preds = {}
    for side in ("A", "B"):
        pre = side + ":"
        if use_p:
            bag = g.input(pre + "bag", shape=(None, dims.d_p))
            off = g.input(pre + "offsets", shape=(None,))
            preds["p" + side] = g.sigmoid(pathology_logit(g, bag, off, pre, dims, dropout, side), name="p" + side)
        if use_g:
            gene = g.input(pre + "gene", shape=(None, dims.d_g))
            preds["g" + side] = g.sigmoid(genomics_logit(g, gene, pre, dims, dropout, side), name="g" + side)
    terms = objectives.ratio_loss_graph(g, preds, mode)
    g.set_output(objectives.total(g, terms.values()))
    return g, terms, preds


def build_cox_graph(dims: ModelDims, dropout: float = 0.0):
    g = Graph()
    bag, off, gene = member_inputs(g, "Z:", dims)
    t = g.input("times", shape=(None,))
    e = g.input("events", shape=(None,))
    terms = {
        "cox_p": g.cox_npll(pathology_logit(g, bag, off, "Z:", dims, dropout, "A"), t, e),
        "cox_g": g.cox_npll(genomics_logit(g, gene, "Z:", dims, dropout, "A"), t, e),
    }
    g.set_output(g.add(terms["cox_p"], terms["cox_g"]))
    return g, terms


def _full_grads(grads: GradStore, prefix: str, template: ParamSet) -> GradStore:
    out = GradStore.for_shapes(template.shapes())
    for k, v in grads.subset(prefix).items():
        out[k] = v
    return out


class Trainer:
    """Runs the window loop; resumable from a ``TrainState`` at any window boundary."""

    def __init__(self, cohort: Cohort, pairs: list[ContrastPair], cfg: TrainConfig,
                 dims: ModelDims | None = None, state: TrainState | None = None,
                 log_line: Callable[[str], None] | None = None):
        self.cohort = cohort
        self.cfg = cfg
        self.dims = dims or (state.dims if state else ModelDims(d_p=cohort.d_p, d_g=cohort.d_g))
        if self.dims.d_p != cohort.d_p or self.dims.d_g != cohort.d_g:
            raise TrainingError(
                f"model expects d_p={self.dims.d_p}, d_g={self.dims.d_g}; "
                f"cohort has d_p={cohort.d_p}, d_g={cohort.d_g}")
        self.log_line = log_line
        self.features = cohort.features
        if cfg.loss_mode == "cox_baseline":
            self.units = np.array(cohort.ids, dtype=object)
            self.window_size = cfg.accumulation_forwards
            self.graph, self.terms = build_cox_graph(self.dims, cfg.dropout_rate)
            self._times = {r.id: r.time for r in cohort.records}
            self._events = {r.id: float(r.event) for r in cohort.records}
        else:
            if not pairs:
                raise TrainingError("no contrast pairs to train on")
            known = set(cohort.features)
            bad = sorted({i for p in pairs for i in (p.higher_id, p.lower_id) if i not in known})
            if bad:
                raise TrainingError(f"pairs reference ids missing from the cohort: {bad[:5]}")
            slot_a = [p.higher_id if cfg.swap_roles else p.lower_id for p in pairs]
            slot_b = [p.lower_id if cfg.swap_roles else p.higher_id for p in pairs]
            self.units = np.array(list(zip(slot_a, slot_b)), dtype=object)
            self.window_size = cfg.window_pairs
            self.graph, self.terms, _ = build_pair_graph(self.dims, cfg.loss_mode, cfg.dropout_rate)
        self.state = state if state is not None else TrainState.fresh(self.dims, cfg)
        if not self.state.config:
            self.state.config = cfg.to_dict()

    @property
    def windows_per_epoch(self) -> int:
        return -(-len(self.units) // self.window_size)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, 0, epoch]).permutation(len(self.units))

    def _rngs(self, epoch: int, window: int):
        if self.cfg.dropout_rate == 0:
            return None
        return {
            "A": np.random.default_rng([self.cfg.seed, 1, epoch, window]),
            "B": np.random.default_rng([self.cfg.seed, 2, epoch, window]),
        }

    def _step(self, theta: ParamSet, grads: GradStore, opt: OptimizerState) -> ParamSet:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return sgd_step(theta, grads, cfg.learning_rate)
        return adam_step(theta, grads, opt, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    def run_window(self, batch, on_sync=None) -> tuple[float, dict[str, float]] | None:
        """One accumulation window over ``batch`` (units of this mode).

        ``on_sync`` is called with the state right after theta_Z was copied
        into both sides, before any forward pass.
        """
        st = self.state
        st.theta_A = st.theta_Z.copy()
        st.theta_B = st.theta_Z.copy()
        if on_sync is not None:
            on_sync(st)
        rngs = self._rngs(st.epoch, st.window)
        if self.cfg.loss_mode == "cox_baseline":
            ids = list(batch)
            events = np.array([self._events[i] for i in ids])
            if not events.any():
                return None
            inputs = stack_members(self.features, ids, "Z:")
            inputs["times"] = np.array([self._times[i] for i in ids])
            inputs["events"] = events
            loss = float(self.graph.forward(st.theta_Z.prefixed("Z:"), inputs, rngs))
            grads = _full_grads(self.graph.backward(), "Z:", st.theta_Z)
            st.theta_Z = self._step(st.theta_Z, grads, st.opt_A)
            st.theta_A = st.theta_Z.copy()
            st.theta_B = st.theta_Z.copy()
            n = len(ids)
        else:
            a_ids = [u[0] for u in batch]
            b_ids = [u[1] for u in batch]
            use_p, use_g = _uses(self.cfg.loss_mode)
            inputs = {}
            for pre, ids in (("A:", a_ids), ("B:", b_ids)):
                stacked = stack_members(self.features, ids, pre)
                if not use_p:
                    del stacked[pre + "bag"], stacked[pre + "offsets"]
                if not use_g:
                    del stacked[pre + "gene"]
                inputs.update(stacked)
            params = {**st.theta_A.prefixed("A:"), **st.theta_B.prefixed("B:")}
            loss = float(self.graph.forward(params, inputs, rngs))
            raw = self.graph.backward()
            grads_A = _full_grads(raw, "A:", st.theta_A)
            grads_B = _full_grads(raw, "B:", st.theta_B)
            st.theta_A = self._step(st.theta_A, grads_A, st.opt_A)
            st.theta_B = self._step(st.theta_B, grads_B, st.opt_B)
            st.theta_Z = ParamSet.average(st.theta_A, st.theta_B)
            n = len(batch)
        if not st.theta_Z.allfinite():
            raise TrainingError(f"non-finite parameters after epoch {st.epoch} window {st.window}")
        terms = {k: float(self.graph.value(v)) / n for k, v in self.terms.items()}
        return loss / n, terms

    def run(self, max_windows: int | None = None,
            on_window: Callable[[TrainState], None] | None = None) -> TrainState:
        """Train until ``cfg.epochs`` are complete or ``max_windows`` windows ran.

        ``on_window`` sees the state at each window boundary, right after
        theta_Z has been copied into both sides.
        """
        st = self.state
        ran = 0
        W = self.window_size
        while st.epoch < self.cfg.epochs:
            order = self._epoch_order(st.epoch)
            while st.window < self.windows_per_epoch:
                if max_windows is not None and ran >= max_windows:
                    return st
                sel = order[st.window * W:(st.window + 1) * W]
                result = self.run_window(self.units[sel], on_window)
                if result is not None and self.log_line is not None:
                    loss, terms = result
                    breakdown = ";".join(f"{k}={v:.6g}" for k, v in terms.items())
                    self.log_line(f"{st.epoch},{st.window},{loss:.6g},{breakdown}")
                st.window += 1
                st.windows_done += 1
                ran += 1
            st.epoch += 1
            st.window = 0
            log.debug("finished epoch %d", st.epoch)
        return st


TRAIN_LOG_HEADER = "epoch,window,loss_mean,term_breakdown"


def train(cohort: Cohort, pairs: list[ContrastPair], cfg: TrainConfig,
          dims: ModelDims | None = None, log_line: Callable[[str], None] | None = None) -> ParamSet:
    """Train from a fresh initialization and return the final theta_Z."""
    return Trainer(cohort, pairs, cfg, dims, log_line=log_line).run().theta_Z
