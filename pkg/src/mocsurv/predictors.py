"""Multimodal survival risk predictor.

Pathology branch: gated-attention pooling over a patch bag followed by an MLP
with a sigmoid head.  Genomics branch: self-normalizing MLP (SELU, alpha
dropout) with a sigmoid head.  The fused risk is the mean of both outputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node, ParamSet, ShapeError, sigmoid

CKPT_MAGIC = b"MOCK"
CKPT_VERSION = 1


@dataclass
class ModelDims:
    d_p: int = 1024
    d_g: int = 256
    attn_dim: int = 256
    path_hidden: tuple[int, ...] = (512, 256)
    gene_hidden: tuple[int, ...] = (256, 256)
    path_activation: str = "relu"

    def __post_init__(self):
        self.path_hidden = tuple(int(h) for h in self.path_hidden)
        self.gene_hidden = tuple(int(h) for h in self.gene_hidden)
        if min(self.d_p, self.d_g, self.attn_dim, *self.path_hidden, *self.gene_hidden) < 1:
            raise ValueError("model dimensions must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["path_hidden"] = list(self.path_hidden)
        d["gene_hidden"] = list(self.gene_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        return cls(**d)


@dataclass
class RiskPrediction:
    p: float
    g: float
    r: float = field(init=False)

    def __post_init__(self):
        self.r = fuse(self.p, self.g)


def fuse(p, g):
    """Decision-level fusion: arithmetic mean of the two modality risks."""
    return (p + g) / 2


# ---------------------------------------------------------------------------
# parameters


def _mlp_sizes(d_in: int, hidden) -> list[tuple[int, int]]:
    sizes = [d_in, *hidden, 1]
    return list(zip(sizes[:-1], sizes[1:]))


def init_params(seed: int, dims: ModelDims) -> ParamSet:
    """Fan-in scaled Gaussian weights, zero biases, zero output layers.

    The zero output layers make every fresh predictor emit exactly 0.5.
    """
    rng = np.random.default_rng(seed)
    ps = []
    relu_like = dims.path_activation == "relu"

    def gauss(out_dim, in_dim, gain=1.0):
        return rng.normal(0.0, np.sqrt(gain / in_dim), size=(out_dim, in_dim))

    ps.append(("path.V", gauss(dims.attn_dim, dims.d_p)))
    ps.append(("path.U", gauss(dims.attn_dim, dims.d_p)))
    ps.append(("path.w", gauss(1, dims.attn_dim)))
    layers = _mlp_sizes(dims.d_p, dims.path_hidden)
    for i, (a, b) in enumerate(layers, start=1):
        last = i == len(layers)
        ps.append((f"path.fc{i}.W", np.zeros((b, a)) if last else gauss(b, a, 2.0 if relu_like else 1.0)))
        ps.append((f"path.fc{i}.b", np.zeros(b)))
    layers = _mlp_sizes(dims.d_g, dims.gene_hidden)
    for i, (a, b) in enumerate(layers, start=1):
        last = i == len(layers)
        # LeCun normal keeps SELU activations self-normalizing
        ps.append((f"gene.fc{i}.W", np.zeros((b, a)) if last else gauss(b, a)))
        ps.append((f"gene.fc{i}.b", np.zeros(b)))
    return ParamSet(ps)


def branch_names(params: ParamSet, branch: str) -> list[str]:
    return [n for n in params.names() if n.startswith(branch + ".")]


# ---------------------------------------------------------------------------
# graph fragments


def attention_weights(g: Graph, bag: Node, offsets: Node, prefix: str) -> Node:
    """Gated attention scores tanh(V pf) * sigmoid(U pf) projected on w, softmaxed per bag."""
    gate = g.mul(
        g.tanh(g.affine(bag, g.param(prefix + "path.V"))),
        g.sigmoid(g.affine(bag, g.param(prefix + "path.U"))),
    )
    scores = g.affine(gate, g.param(prefix + "path.w"))
    return g.segment_softmax(scores, offsets, name=prefix + "attention")


def pathology_logit(g: Graph, bag: Node, offsets: Node, prefix: str, dims: ModelDims,
                    dropout: float = 0.0, stream: str = "default") -> Node:
    alpha = attention_weights(g, bag, offsets, prefix)
    h = g.segment_weighted_sum(alpha, bag, offsets, name=prefix + "wf")
    n_layers = len(dims.path_hidden) + 1
    for i in range(1, n_layers + 1):
        h = g.affine(h, g.param(f"{prefix}path.fc{i}.W"), g.param(f"{prefix}path.fc{i}.b"))
        if i < n_layers:
            h = g.activation(dims.path_activation, h)
            if dropout > 0:
                h = g.dropout(h, dropout, stream=stream)
    return h


def genomics_logit(g: Graph, gene: Node, prefix: str, dims: ModelDims,
                   dropout: float = 0.0, stream: str = "default") -> Node:
    h = gene
    n_layers = len(dims.gene_hidden) + 1
    for i in range(1, n_layers + 1):
        h = g.affine(h, g.param(f"{prefix}gene.fc{i}.W"), g.param(f"{prefix}gene.fc{i}.b"))
        if i < n_layers:
            h = g.selu(h)
            if dropout > 0:
                h = g.alpha_dropout(h, dropout, stream=stream)
    return h


def member_inputs(g: Graph, prefix: str, dims: ModelDims):
    """Declare the batched inputs of one predictor: bag rows, bag offsets, genes."""
    bag = g.input(prefix + "bag", shape=(None, dims.d_p))
    offsets = g.input(prefix + "offsets", shape=(None,))
    gene = g.input(prefix + "gene", shape=(None, dims.d_g))
    return bag, offsets, gene


def stack_members(features, ids, prefix: str = "") -> dict[str, np.ndarray]:
    """Concatenate the bags of ``ids`` row-wise and stack their gene vectors."""
    bags = [features[i].bag for i in ids]
    sizes = np.fromiter((b.shape[0] for b in bags), dtype=np.int64, count=len(bags))
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.float64)
    return {
        prefix + "bag": np.concatenate(bags, axis=0),
        prefix + "offsets": offsets,
        prefix + "gene": np.stack([features[i].gene for i in ids]),
    }


# ---------------------------------------------------------------------------
# inference


def _check_bag(bag, dims: ModelDims) -> np.ndarray:
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] < 1 or bag.shape[1] != dims.d_p:
        raise ShapeError("bag", ("n>=1", dims.d_p), bag.shape)
    return bag


def _check_gene(gene, dims: ModelDims) -> np.ndarray:
    gene = np.asarray(gene, dtype=np.float64)
    if gene.shape != (dims.d_g,):
        raise ShapeError("gene", (dims.d_g,), gene.shape)
    return gene


def amil_aggregate(bag, params: ParamSet, dims: ModelDims) -> tuple[np.ndarray, np.ndarray]:
    """Attention-pooled bag feature and the per-patch weights."""
    bag = _check_bag(bag, dims)
    g = Graph()
    b = g.input("bag", shape=(None, dims.d_p))
    off = g.input("offsets", shape=(None,))
    alpha = attention_weights(g, b, off, "")
    g.set_output(g.segment_weighted_sum(alpha, b, off))
    wf = g.forward(params, {"bag": bag, "offsets": np.zeros(1)})
    return wf[0], g.value(alpha)[:, 0]


def predict_pathology(bag, params: ParamSet, dims: ModelDims) -> float:
    bag = _check_bag(bag, dims)
    g = Graph()
    b = g.input("bag", shape=(None, dims.d_p))
    off = g.input("offsets", shape=(None,))
    g.set_output(g.sigmoid(pathology_logit(g, b, off, "", dims)))
    return float(g.forward(params, {"bag": bag, "offsets": np.zeros(1)})[0, 0])


def predict_genomics(gene, params: ParamSet, dims: ModelDims) -> float:
    gene = _check_gene(gene, dims)
    g = Graph()
    x = g.input("gene", shape=(None, dims.d_g))
    g.set_output(g.sigmoid(genomics_logit(g, x, "", dims)))
    return float(g.forward(params, {"gene": gene[None, :]})[0, 0])


def predict(params: ParamSet, dims: ModelDims, bag, gene) -> RiskPrediction:
    return RiskPrediction(predict_pathology(bag, params, dims), predict_genomics(gene, params, dims))


class BatchPredictor:
    """Evaluation-mode predictions for many samples at once."""

    def __init__(self, dims: ModelDims):
        self.dims = dims
        g = Graph()
        bag, off, gene = member_inputs(g, "", dims)
        self.logit_p = pathology_logit(g, bag, off, "", dims)
        self.logit_g = genomics_logit(g, gene, "", dims)
        g.set_output(g.add(self.logit_p, self.logit_g))
        self.graph = g

    def logits(self, params: ParamSet, features, ids, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
        ids = list(ids)
        op, og = [], []
        for s in range(0, len(ids), chunk):
            self.graph.forward(params, stack_members(features, ids[s:s + chunk]))
            op.append(self.graph.value(self.logit_p)[:, 0])
            og.append(self.graph.value(self.logit_g)[:, 0])
        if not ids:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(op), np.concatenate(og)

    def __call__(self, params: ParamSet, features, ids) -> dict[str, np.ndarray]:
        lp, lg = self.logits(params, features, ids)
        p, g = sigmoid(lp), sigmoid(lg)
        return {"p": p, "g": g, "r": fuse(p, g)}


# ---------------------------------------------------------------------------
# checkpoint files


class CheckpointError(Exception):
    pass


def write_checkpoint(path, header: dict, sections: dict[str, np.ndarray]) -> None:
    """MOCK | u32 version | u32 header_len | JSON header | u32 n_sections | sections.

    Each section: u32 name_len | name | u64 count | count little-endian float64.
    """
    hdr = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hdr)), hdr, struct.pack("<I", len(sections))]
    for name, arr in sections.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<Q", arr.size), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated file")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, hlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(take(hlen))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    (count,) = struct.unpack("<I", take(4))
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (size,) = struct.unpack("<Q", take(8))
        sections[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return header, sections


def save_params(path, params: ParamSet, dims: ModelDims) -> None:
    header = {"kind": "params", "dims": dims.to_dict(), "n_params": params.size}
    write_checkpoint(path, header, {"theta": params.flat()})
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_params(path) -> tuple[ParamSet, ModelDims]:
    """Model parameters from a params or train-state checkpoint."""
    header, sections = read_checkpoint(path)
    if "dims" not in header:
        raise CheckpointError(f"{path}: header lacks model dimensions")
    dims = ModelDims.from_dict(header["dims"])
    key = "theta" if "theta" in sections else "theta_Z"
    if key not in sections:
        raise CheckpointError(f"{path}: no parameter section")
    template = init_params(0, dims)
    if sections[key].size != template.size:
        raise CheckpointError(f"{path}: expected {template.size} parameters, found {sections[key].size}")
    return template.with_flat(sections[key]), dims
