"""Gated graph transformer for complex quality scoring.

Per layer and head, with ``h`` node and ``e`` edge embeddings and an edge
``j -> i``::

    raw_ij  = ((Q h_i . K h_j) / sqrt(d_k)) * E e_ij          (d_k vector)
    e'_ij   = O_e concat_heads(raw_ij)                          edge stream
    gated   = raw_ij * sigmoid(G_e e_ij)                        edge gate
    w_ij    = softmax over j in N(i), per channel
    h'_i    = O_h concat_heads(sum_j sigmoid(G_h h_j) * w_ij * V h_j)

Both streams then go through residual + BatchNorm + FFN + residual +
BatchNorm.  Graphs are sum-pooled; a read-out MLP gives 4 class logits and a
second read-out maps the logits to the DockQ estimate through a sigmoid.

``gate_mode`` switches the two gates off independently: ``both`` (default),
``edge_only``, ``node_only`` and ``none`` (a plain graph transformer layer).
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import FormatError, ShapeMismatch
from .featurize import NUM_EDGE_FEATURES, NUM_NODE_FEATURES

GATE_MODES = ("both", "edge_only", "node_only", "none")
POOLING = ("sum", "mean", "max")
CLASS_NAMES = ("Incorrect", "Acceptable", "Medium", "High")


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 8
    ggt_dropout: float = 0.4
    readout_dropout: float = 0.5
    w_lc: float = 0.1
    w_lr: float = 0.9
    gate_mode: str = "both"
    pooling: str = "sum"
    node_in: int = NUM_NODE_FEATURES
    edge_in: int = NUM_EDGE_FEATURES
    ffn_mult: int = 2
    readout_hidden: int = 32
    num_classes: int = 4

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")
        for name in ("ggt_dropout", "readout_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    @property
    def edge_gate(self):
        return self.gate_mode in ("both", "edge_only")

    @property
    def node_gate(self):
        return self.gate_mode in ("both", "node_only")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class QualityPrediction:
    q: float
    y: np.ndarray

    @property
    def predicted_class(self):
        return int(np.argmax(self.y))


@dataclass
class GraphBatch:
    """Block-diagonal union of several graphs."""

    node_features: np.ndarray
    edge_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    num_graphs: int
    ids: list = field(default_factory=list)

    @property
    def num_nodes(self):
        return int(self.node_features.shape[0])

    @property
    def num_edges(self):
        return int(self.src.shape[0])


def collate(graphs, dtype=nc.DEFAULT_DTYPE):
    """Stack graphs into one :class:`GraphBatch`, offsetting edge indices."""
    graphs = list(graphs)
    if not graphs:
        raise ValueError("cannot collate an empty list of graphs")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    return GraphBatch(
        node_features=np.concatenate([g.node_features for g in graphs]).astype(dtype),
        edge_features=np.concatenate([g.edge_features for g in graphs]).astype(dtype),
        src=np.concatenate([g.src + o for g, o in zip(graphs, offsets)]).astype(np.int64),
        dst=np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]).astype(np.int64),
        node_graph=np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs]),
        num_graphs=len(graphs),
        ids=[(g.target_id, g.decoy_id) for g in graphs],
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _linear(store, prefix, fan_in, fan_out, bias=True):
    # Kaiming-uniform for LeakyReLU
    bound = math.sqrt(6.0 / ((1.0 + nc.LEAKY_SLOPE ** 2) * fan_in))
    store.uniform(f"{prefix}.W", (fan_in, fan_out), bound)
    if bias:
        store.zeros(f"{prefix}.b", (fan_out,))


def _batchnorm(store, prefix, width):
    store.ones(f"{prefix}.gamma", (width,))
    store.zeros(f"{prefix}.beta", (width,))
    store.add_buffer(f"{prefix}.running_mean", np.zeros(width))
    store.add_buffer(f"{prefix}.running_var", np.ones(width))


def init_params(config, seed=0, dtype=nc.DEFAULT_DTYPE):
    """Fresh :class:`~complexqa.numcore.ParamStore` for ``config``."""
    d = config.hidden_dim
    store = nc.ParamStore(seed=seed, dtype=dtype)
    _linear(store, "embed.node", config.node_in, d)
    _batchnorm(store, "embed.node.bn", d)
    _linear(store, "embed.edge", config.edge_in, d)
    _batchnorm(store, "embed.edge.bn", d)
    for layer in range(config.num_layers):
        p = f"layer{layer}"
        for name in ("Q", "K", "V", "E", "Ge", "Gh"):
            _linear(store, f"{p}.{name}", d, d, bias=False)
        _linear(store, f"{p}.O_h", d, d)
        _linear(store, f"{p}.O_e", d, d)
        for stream in ("node", "edge"):
            _batchnorm(store, f"{p}.{stream}.bn1", d)
            _linear(store, f"{p}.{stream}.ffn1", d, config.ffn_mult * d)
            _linear(store, f"{p}.{stream}.ffn2", config.ffn_mult * d, d)
            _batchnorm(store, f"{p}.{stream}.bn2", d)
    _linear(store, "readout1.fc1", d, config.readout_hidden)
    _batchnorm(store, "readout1.bn", config.readout_hidden)
    _linear(store, "readout1.fc2", config.readout_hidden, config.num_classes)
    _linear(store, "readout2.fc", config.num_classes, 1)
    return store


# ---------------------------------------------------------------------------
# forward context
# ---------------------------------------------------------------------------

class _Context:
    """Mode, dropout keys and optional recording for one forward pass."""

    def __init__(self, params, train, step, record, update_stats):
        self.params = params
        self.train = train
        self.step = step
        self.record = record
        self.update_stats = update_stats

    def bn(self, x, prefix):
        state = {
            "running_mean": self.params.buffers[f"{prefix}.running_mean"],
            "running_var": self.params.buffers[f"{prefix}.running_var"],
        }
        out = nc.batch_norm(
            x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"], state,
            train=self.train, update_stats=self.update_stats,
        )
        if self.train and self.update_stats:
            self.params.buffers[f"{prefix}.running_mean"] = state["running_mean"]
            self.params.buffers[f"{prefix}.running_var"] = state["running_var"]
        return out

    def dropout(self, x, rate, site):
        if not self.train or rate <= 0.0:
            return x
        return nc.dropout(x, rate, nc.dropout_rng(self.params.seed, site, self.step), True)

    def linear(self, x, prefix):
        bias = f"{prefix}.b"
        return nc.linear(x, self.params[f"{prefix}.W"], self.params[bias] if bias in self.params else None)

    def keep(self, key, tensor):
        if self.record is not None:
            self.record.setdefault(key, []).append(tensor.data.copy())


def _ctx(params, mode, step=0, record=None, update_stats=True):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return _Context(params, mode == "train", step, record, update_stats)


# ---------------------------------------------------------------------------
# model pieces
# ---------------------------------------------------------------------------

def embed(batch, params, config, mode="eval", step=0, ctx=None):
    """Linear + BatchNorm + LeakyReLU embeddings of node and edge features."""
    ctx = ctx or _ctx(params, mode, step)
    if batch.node_features.shape[1] != config.node_in or batch.edge_features.shape[1] != config.edge_in:
        raise ShapeMismatch(
            f"expected {config.node_in}/{config.edge_in} feature columns, got "
            f"{batch.node_features.shape[1]}/{batch.edge_features.shape[1]}"
        )
    dtype = params.dtype
    f = nc.Tensor(batch.node_features, dtype=dtype)
    x = nc.Tensor(batch.edge_features, dtype=dtype)
    h = nc.leaky_relu(ctx.bn(ctx.linear(f, "embed.node"), "embed.node.bn"))
    e = nc.leaky_relu(ctx.bn(ctx.linear(x, "embed.edge"), "embed.edge.bn"))
    return h, e


def attention_raw(h, e, batch, params, config, layer):
    """Per-edge, per-head scaled dot product times the projected edge vector.

    Returns an ``M × hidden_dim`` tensor laid out head-major (head k occupies
    columns ``k*d_k:(k+1)*d_k``).
    """
    p = f"layer{layer}"
    m, heads, dk = batch.num_edges, config.num_heads, config.head_dim
    q = nc.matmul(h, params[f"{p}.Q.W"])
    k = nc.matmul(h, params[f"{p}.K.W"])
    qk = nc.mul(nc.gather_rows(q, batch.dst), nc.gather_rows(k, batch.src))
    score = nc.scale(nc.sum(nc.reshape(qk, (m, heads, dk)), axis=2, keepdims=True), 1.0 / math.sqrt(dk))
    proj = nc.reshape(nc.matmul(e, params[f"{p}.E.W"]), (m, heads, dk))
    return nc.reshape(nc.mul(score, proj), (m, heads * dk))


def _ffn_block(x, residual_in, ctx, config, prefix, site):
    """residual -> BN -> FFN -> dropout -> residual -> BN."""
    x1 = ctx.bn(nc.add(residual_in, x), f"{prefix}.bn1")
    hidden = nc.leaky_relu(ctx.linear(x1, f"{prefix}.ffn1"))
    x2 = ctx.dropout(ctx.linear(hidden, f"{prefix}.ffn2"), config.ggt_dropout, f"{site}.ffn")
    return ctx.bn(nc.add(x1, x2), f"{prefix}.bn2")


def update_edges(raw, e, params, config, layer, mode="eval", step=0, ctx=None):
    """Edge stream: head concat -> O_e -> residual/BN/FFN."""
    ctx = ctx or _ctx(params, mode, step)
    p = f"layer{layer}"
    e_hat = ctx.dropout(ctx.linear(raw, f"{p}.O_e"), config.ggt_dropout, f"{p}.edge.attn")
    return _ffn_block(e_hat, e, ctx, config, f"{p}.edge", f"{p}.edge")


def gate_and_normalize(raw, e, batch, params, config, layer, ctx=None):
    """Edge gate then softmax over each destination's in-edges, per channel."""
    scores = raw
    if config.edge_gate:
        gate = nc.sigmoid(nc.matmul(e, params[f"layer{layer}.Ge.W"]))
        if ctx is not None:
            ctx.keep("edge_gate", gate)
        scores = nc.mul(raw, gate)
    w = nc.segment_softmax(scores, batch.dst, batch.num_nodes)
    if ctx is not None:
        ctx.keep("attention", w)
    return w


def update_nodes(h, w, batch, params, config, layer, mode="eval", step=0, ctx=None):
    """Node stream: gated weighted sum of neighbour values -> O_h -> residual/BN/FFN."""
    ctx = ctx or _ctx(params, mode, step)
    p = f"layer{layer}"
    v_src = nc.gather_rows(nc.matmul(h, params[f"{p}.V.W"]), batch.src)
    msg = nc.mul(w, v_src)
    if config.node_gate:
        gate = nc.sigmoid(nc.matmul(h, params[f"{p}.Gh.W"]))
        ctx.keep("node_gate", gate)
        msg = nc.mul(msg, nc.gather_rows(gate, batch.src))
    agg = nc.segment_sum(msg, batch.dst, batch.num_nodes)
    h_hat = ctx.dropout(ctx.linear(agg, f"{p}.O_h"), config.ggt_dropout, f"{p}.node.attn")
    return _ffn_block(h_hat, h, ctx, config, f"{p}.node", f"{p}.node")


def ggt_layer(h, e, batch, params, config, layer, mode="eval", step=0, ctx=None):
    """One gated graph transformer layer; returns updated ``(h, e)``."""
    ctx = ctx or _ctx(params, mode, step)
    raw = attention_raw(h, e, batch, params, config, layer)
    w = gate_and_normalize(raw, e, batch, params, config, layer, ctx=ctx)
    h_next = update_nodes(h, w, batch, params, config, layer, ctx=ctx)
    e_next = update_edges(raw, e, params, config, layer, ctx=ctx)
    return h_next, e_next


@dataclass
class ModelOutput:
    q: nc.Tensor       # (G,)
    y: nc.Tensor       # (G, 4)
    logits: nc.Tensor  # (G, 4)
    record: dict = None

    def predictions(self):
        return [QualityPrediction(float(q), y.copy()) for q, y in zip(self.q.data, self.y.data)]


def pool(h, batch, config):
    if config.pooling == "sum":
        return nc.segment_sum(h, batch.node_graph, batch.num_graphs)
    if config.pooling == "mean":
        return nc.segment_mean(h, batch.node_graph, batch.num_graphs)
    return nc.segment_max(h, batch.node_graph, batch.num_graphs)


def forward(batch, params, config, mode="eval", step=0, record=None, update_stats=True):
    """Full forward pass over a :class:`GraphBatch` (or a single graph)."""
    if not isinstance(batch, GraphBatch):
        batch = collate([batch], dtype=params.dtype)
    ctx = _ctx(params, mode, step, record, update_stats)
    h, e = embed(batch, params, config, ctx=ctx)
    for layer in range(config.num_layers):
        h, e = ggt_layer(h, e, batch, params, config, layer, ctx=ctx)
        ctx.keep("h", h)
        ctx.keep("e", e)
    pooled = pool(h, batch, config)
    z = nc.leaky_relu(ctx.bn(ctx.linear(pooled, "readout1.fc1"), "readout1.bn"))
    z = ctx.dropout(z, config.readout_dropout, "readout1")
    logits = ctx.linear(z, "readout1.fc2")
    y = nc.softmax_rows(logits)
    q = nc.reshape(nc.sigmoid(ctx.linear(logits, "readout2.fc")), (batch.num_graphs,))
    return ModelOutput(q=q, y=y, logits=logits, record=record)


def predict(graphs, params, config):
    """Eval-mode predictions for a list of graphs, one forward pass for all."""
    with nc.no_grad():
        out = forward(collate(graphs, dtype=params.dtype), params, config, mode="eval")
    return out.predictions()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_regression(q_pred, q_true):
    """Mean squared error between predicted and true DockQ."""
    q_pred = nc.as_tensor(q_pred)
    target = np.asarray(q_true, dtype=q_pred.dtype).reshape(q_pred.shape)
    return nc.mean(nc.square(nc.sub(q_pred, nc.Tensor(target, dtype=q_pred.dtype))))


def loss_classification(y_pred, class_true):
    """Categorical cross-entropy ``-mean(log y[class])`` on probability rows."""
    y_pred = nc.as_tensor(y_pred)
    classes = np.asarray(class_true, dtype=np.int64).reshape(-1)
    if classes.shape[0] != y_pred.shape[0]:
        raise ShapeMismatch("one class label per prediction row required")
    onehot = np.zeros(y_pred.shape, dtype=y_pred.dtype)
    onehot[np.arange(classes.shape[0]), classes] = 1.0
    picked = nc.sum(nc.mul(y_pred, nc.Tensor(onehot, dtype=y_pred.dtype)), axis=1)
    return nc.scale(nc.mean(nc.log(picked)), -1.0)


def loss_total(l_c, l_r, config):
    """Weighted sum ``w_lc * L_C + w_lr * L_R``; works on tensors or floats."""
    if isinstance(l_c, nc.Tensor) or isinstance(l_r, nc.Tensor):
        return nc.add(nc.scale(nc.as_tensor(l_c), config.w_lc), nc.scale(nc.as_tensor(l_r), config.w_lr))
    return config.w_lc * l_c + config.w_lr * l_r


def compute_losses(output, dockq, classes, config):
    """``(L, L_C, L_R)`` tensors for a forward output and its labels."""
    l_r = loss_regression(output.q, dockq)
    l_c = loss_classification(output.y, classes)
    return loss_total(l_c, l_r, config), l_c, l_r


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CQAMODEL"
CHECKPOINT_FORMAT_VERSION = 1


def checkpoint_to_bytes(params, config, extra=None):
    arrays = params.state_arrays()
    manifest = [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()]
    header = {
        "format": "complexqa-checkpoint",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "seed": params.seed,
        "counter": params.counter,
        "dtype": "<f4",
        "manifest": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    parts.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    return b"".join(parts)


def checkpoint_from_bytes(data):
    """Returns ``(params, config, header)``."""
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a complexqa checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    params = init_params(config, seed=header["seed"])
    params.counter = header.get("counter", 0)
    offset = 12 + hlen
    arrays = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if offset + 4 * count > len(data):
            raise FormatError(f"truncated block {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset += 4 * count
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the parameter blocks")
    expected = set(params.state_arrays())
    if set(arrays) != expected:
        raise FormatError("checkpoint manifest does not match the model layout")
    params.load_arrays(arrays)
    return params, config, header


def save_checkpoint(path, params, config, extra=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(params, config, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
