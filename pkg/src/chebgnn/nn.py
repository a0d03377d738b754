"""Layers with hand-written backward passes and the architecture builder.

Every layer stores what its backward pass needs during ``forward`` and
accumulates parameter gradients into views of the owning model's flat
gradient vector.  All arithmetic is float64.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .cheb import chebyshev_adjoint, chebyshev_basis
from .graph import BatchedGraph, GraphError

TASKS = ("node-classification", "graph-regression", "graph-binary")
CHECKPOINT_SCHEMA = "chebgnn.checkpoint/1"


class SpecError(ValueError):
    """Malformed architecture string or inconsistent layer dimensions."""


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class.  Subclasses declare ``param_shapes`` and implement the passes."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def param_shapes(self) -> List[Tuple[str, tuple]]:
        return []

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x, ctx, train: bool):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def children(self) -> List["Layer"]:
        return []


class Embedding(Layer):
    """Lookup table for categorical node codes.

    With dense float features the table acts as a bias-free linear map.
    """

    def __init__(self, vocab: int, dim: int):
        super().__init__()
        self.vocab, self.dim = vocab, dim

    def param_shapes(self):
        return [("table", (self.vocab, self.dim))]

    def init_params(self, rng):
        self.params["table"][...] = glorot_uniform(
            rng, (self.vocab, self.dim), self.vocab, self.dim
        )

    def forward(self, x, ctx, train):
        x = np.asarray(x)
        self._x = x
        if x.ndim == 1:
            if len(x) and (x.min() < 0 or x.max() >= self.vocab):
                bad = int(x[(x < 0) | (x >= self.vocab)][0])
                raise GraphError(f"feature code {bad} outside vocabulary of size {self.vocab}")
            return self.params["table"][x]
        if x.shape[1] != self.vocab:
            raise GraphError(f"dense features have width {x.shape[1]}, expected {self.vocab}")
        return x @ self.params["table"]

    def backward(self, gy):
        if self._x.ndim == 1:
            np.add.at(self.grads["table"], self._x, gy)
            return None
        self.grads["table"] += self._x.T @ gy
        return gy @ self.params["table"].T


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim

    def param_shapes(self):
        return [("weight", (self.in_dim, self.out_dim)), ("bias", (self.out_dim,))]

    def init_params(self, rng):
        self.params["weight"][...] = glorot_uniform(
            rng, (self.in_dim, self.out_dim), self.in_dim, self.out_dim
        )

    def forward(self, x, ctx, train):
        if x.shape[1] != self.in_dim:
            raise GraphError(f"linear layer expects width {self.in_dim}, got {x.shape[1]}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, gy):
        self.grads["weight"] += self._x.T @ gy
        self.grads["bias"] += gy.sum(axis=0)
        return gy @ self.params["weight"].T


class ChebConv(Layer):
    """Multi-channel Chebyshev convolution ``Y = sum_i T_i(L) X Theta_i + b``.

    ``order`` is the polynomial degree, so ``Theta`` holds ``order + 1``
    matrices.  All terms are concatenated so the channel mixing is one GEMM.
    """

    def __init__(self, order: int, in_dim: int, out_dim: int):
        super().__init__()
        if order < 0:
            raise SpecError(f"Chebyshev order must be >= 0, got {order}")
        self.order, self.in_dim, self.out_dim = order, in_dim, out_dim

    def param_shapes(self):
        return [
            ("theta", (self.order + 1, self.in_dim, self.out_dim)),
            ("bias", (self.out_dim,)),
        ]

    def init_params(self, rng):
        k1 = self.order + 1
        self.params["theta"][...] = glorot_uniform(
            rng, (k1, self.in_dim, self.out_dim), k1 * self.in_dim, self.out_dim
        )

    def forward(self, x, ctx, train):
        if x.shape[1] != self.in_dim:
            raise GraphError(f"ChebConv expects width {self.in_dim}, got {x.shape[1]}")
        lap = ctx["laplacian"]
        self._lap = lap
        self._terms = np.concatenate(chebyshev_basis(lap, x, self.order), axis=1)
        w = self.params["theta"].reshape(-1, self.out_dim)
        return self._terms @ w + self.params["bias"]

    def backward(self, gy):
        w = self.params["theta"].reshape(-1, self.out_dim)
        self.grads["theta"] += (self._terms.T @ gy).reshape(self.grads["theta"].shape)
        self.grads["bias"] += gy.sum(axis=0)
        gt = gy @ w.T
        return chebyshev_adjoint(self._lap, np.split(gt, self.order + 1, axis=1))


class GCNConv(Layer):
    """Baseline graph convolution ``Y = P X W + b`` with the self-loop renormalized ``P``."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim

    def param_shapes(self):
        return [("weight", (self.in_dim, self.out_dim)), ("bias", (self.out_dim,))]

    def init_params(self, rng):
        self.params["weight"][...] = glorot_uniform(
            rng, (self.in_dim, self.out_dim), self.in_dim, self.out_dim
        )

    def forward(self, x, ctx, train):
        if x.shape[1] != self.in_dim:
            raise GraphError(f"GCNConv expects width {self.in_dim}, got {x.shape[1]}")
        p = ctx["propagation"]
        self._p = p
        self._px = p @ x
        return self._px @ self.params["weight"] + self.params["bias"]

    def backward(self, gy):
        self.grads["weight"] += self._px.T @ gy
        self.grads["bias"] += gy.sum(axis=0)
        return self._p @ (gy @ self.params["weight"].T)


class BatchNorm(Layer):
    """Per-feature normalization over all nodes (or graphs) in the batch."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def param_shapes(self):
        return [("gamma", (self.dim,)), ("beta", (self.dim,))]

    def init_params(self, rng):
        self.params["gamma"][...] = 1.0
        self.params["beta"][...] = 0.0

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, ctx, train):
        if train:
            n = x.shape[0]
            if n < 2:
                raise GraphError("batch norm in training mode needs at least 2 rows")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        self._train = train
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv_std
        return self._xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, gy):
        self.grads["gamma"] += (gy * self._xhat).sum(axis=0)
        self.grads["beta"] += gy.sum(axis=0)
        gxhat = gy * self.params["gamma"]
        if not self._train:
            return gxhat * self._inv_std
        xhat = self._xhat
        return self._inv_std * (
            gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0)
        )


class ReLU(Layer):
    def forward(self, x, ctx, train):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, gy):
        return gy * self._mask


class MeanPool(Layer):
    """Per-graph mean of node rows; empty graphs pool to zero."""

    def forward(self, x, ctx, train):
        offsets = ctx["offsets"]
        sizes = np.diff(offsets)
        rows = np.repeat(np.arange(len(sizes)), sizes)
        scale = 1.0 / np.maximum(sizes, 1)
        self._pool = sp.csr_matrix(
            (scale[rows], (rows, np.arange(x.shape[0]))), shape=(len(sizes), x.shape[0])
        )
        return self._pool @ x

    def backward(self, gy):
        return self._pool.T @ gy


class ConvBlock(Layer):
    """conv -> batch norm -> ReLU, plus an identity skip when ``residual``."""

    def __init__(self, conv: Layer, residual: bool):
        super().__init__()
        self.conv = conv
        self.norm = BatchNorm(conv.out_dim)
        self.act = ReLU()
        self.residual = residual and conv.in_dim == conv.out_dim

    def children(self):
        return [self.conv, self.norm, self.act]

    def forward(self, x, ctx, train):
        y = self.act.forward(self.norm.forward(self.conv.forward(x, ctx, train), ctx, train), ctx, train)
        return x + y if self.residual else y

    def backward(self, gy):
        gx = self.conv.backward(self.norm.backward(self.act.backward(gy)))
        return gx + gy if self.residual else gx


def residual_add(x: np.ndarray, fx: np.ndarray) -> np.ndarray:
    return x + fx


# ---------------------------------------------------------------------------
# architecture strings

_TOKEN = re.compile(r"No-RC|[A-Za-z]+\d+|\d+|[A-Za-z]+")
_KINDS = ("E", "AE", "ChN", "GCN", "MP", "L")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative architecture, e.g. ``"7 -E70 -ChN70 -ChN70 -MP70 -L35 -L6"``.

    ``k`` follows the architecture table's convention: it is the number of
    Chebyshev polynomials per ChN layer, i.e. polynomial order ``k - 1``.
    """

    layers: Tuple[Tuple[str, int], ...]
    input_dim: int
    task: str = "node-classification"
    residual: bool = True
    k: int = 5
    lambda_max: float = 2.0

    @classmethod
    def parse(
        cls,
        arch: str,
        task: str = "node-classification",
        k: int = 5,
        input_dim: Optional[int] = None,
        residual: Optional[bool] = None,
        lambda_max: float = 2.0,
    ) -> "ModelSpec":
        tokens = _TOKEN.findall(arch.replace("(", " ").replace(")", " "))
        layers = []
        lead = None
        no_rc = False
        for i, tok in enumerate(tokens):
            if tok == "No-RC":
                no_rc = True
                continue
            if tok.isdigit():
                if i != 0:
                    raise SpecError(f"bare number {tok!r} allowed only as the leading input width")
                lead = int(tok)
                continue
            m = re.fullmatch(r"([A-Za-z]+)(\d+)", tok)
            if m is None or m.group(1) not in _KINDS:
                raise SpecError(f"unknown layer token {tok!r}")
            layers.append((m.group(1), int(m.group(2))))
        if input_dim is None:
            input_dim = lead
        elif lead is not None and lead != input_dim:
            raise SpecError(f"architecture declares input width {lead}, got {input_dim}")
        if input_dim is None:
            raise SpecError("input width unknown: give a leading number or input_dim")
        if residual is None:
            residual = not no_rc
        spec = cls(tuple(layers), int(input_dim), task, bool(residual), int(k), float(lambda_max))
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.task not in TASKS:
            raise SpecError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.k < 1:
            raise SpecError("k (number of Chebyshev polynomials) must be >= 1")
        if not self.layers:
            raise SpecError("empty architecture")
        if self.layers[0][0] not in ("E", "AE"):
            raise SpecError("architecture must start with an embedding (E or AE)")
        stage = 0  # 0 embed, 1 conv, 2 pool, 3 linear
        order = {"E": 0, "AE": 0, "ChN": 1, "GCN": 1, "MP": 2, "L": 3}
        dim = self.input_dim
        for kind, d in self.layers:
            if d < 1:
                raise SpecError(f"layer {kind}{d} has non-positive width")
            if order[kind] < stage or (order[kind] == 0 and dim != self.input_dim):
                raise SpecError(f"layer {kind}{d} out of order")
            if kind == "MP" and d != dim:
                raise SpecError(f"MP{d} does not match incoming width {dim}")
            stage = order[kind]
            dim = d
        has_pool = any(k == "MP" for k, _ in self.layers)
        if self.task != "node-classification" and not has_pool:
            raise SpecError("graph-level tasks need an MP layer")
        if self.layers[-1][0] != "L":
            raise SpecError("architecture must end with a linear layer")

    @property
    def output_dim(self) -> int:
        return self.layers[-1][1]

    def to_string(self) -> str:
        body = " -".join(f"{k}{d}" for k, d in self.layers)
        s = f"{self.input_dim} -{body}"
        return s if self.residual else s + " (No-RC)"

    def to_dict(self) -> dict:
        return {
            "arch": self.to_string(),
            "task": self.task,
            "k": self.k,
            "residual": self.residual,
            "lambda_max": self.lambda_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls.parse(
            d["arch"],
            task=d.get("task", "node-classification"),
            k=int(d.get("k", 5)),
            residual=d.get("residual"),
            lambda_max=float(d.get("lambda_max", 2.0)),
        )


# ---------------------------------------------------------------------------
# model


class Model:
    """Instantiated architecture with one flat parameter vector.

    Each layer's ``params``/``grads`` entries are reshaped views into
    ``self.flat`` / ``self.flat_grad``, so an optimizer update on the flat
    vector is immediately visible to every layer.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.seed = int(seed)
        self.embed: Optional[Layer] = None
        self.blocks: List[Layer] = []
        self.pool: Optional[MeanPool] = None
        self.readout: List[Layer] = []

        dim = spec.input_dim
        for kind, d in spec.layers:
            if kind in ("E", "AE"):
                self.embed = Embedding(dim, d)
            elif kind == "ChN":
                self.blocks.append(ConvBlock(ChebConv(spec.k - 1, dim, d), spec.residual))
            elif kind == "GCN":
                self.blocks.append(ConvBlock(GCNConv(dim, d), spec.residual))
            elif kind == "MP":
                if spec.task != "node-classification":
                    self.pool = MeanPool()
            elif kind == "L":
                if self.readout:
                    self.readout.append(ReLU())
                self.readout.append(Linear(dim, d))
            dim = d

        slots = []
        for layer in self.leaves():
            for name, shape in layer.param_shapes():
                slots.append((layer, name, shape))
        total = sum(int(np.prod(s)) for _, _, s in slots)
        self.flat = np.zeros(total)
        self.flat_grad = np.zeros(total)
        pos = 0
        for layer, name, shape in slots:
            size = int(np.prod(shape))
            layer.params[name] = self.flat[pos : pos + size].reshape(shape)
            layer.grads[name] = self.flat_grad[pos : pos + size].reshape(shape)
            pos += size
        rng = np.random.default_rng(self.seed)
        for layer in self.leaves():
            layer.init_params(rng)

    def sequence(self) -> List[Layer]:
        seq = [self.embed] + self.blocks
        if self.pool is not None:
            seq.append(self.pool)
        return seq + self.readout

    def leaves(self) -> List[Layer]:
        out = []

        def walk(layer):
            kids = layer.children()
            if kids:
                for c in kids:
                    walk(c)
            else:
                out.append(layer)

        for layer in self.sequence():
            walk(layer)
        return out

    def buffers(self) -> np.ndarray:
        parts = [b for layer in self.leaves() for b in layer.buffers().values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_buffers(self, flat: np.ndarray) -> None:
        pos = 0
        for layer in self.leaves():
            for buf in layer.buffers().values():
                buf[...] = flat[pos : pos + buf.size]
                pos += buf.size
        if pos != len(flat):
            raise ValueError(f"buffer vector has {len(flat)} entries, model needs {pos}")

    def context(self, bg: BatchedGraph) -> dict:
        ctx = {"offsets": bg.offsets}
        if any(isinstance(b.conv, ChebConv) for b in self.blocks):
            ctx["laplacian"] = bg.scaled_laplacian(self.spec.lambda_max)
        if any(isinstance(b.conv, GCNConv) for b in self.blocks):
            ctx["propagation"] = bg.gcn_propagation()
        return ctx

    def forward(self, bg: BatchedGraph, train: bool = False) -> np.ndarray:
        if bg.graph.features is None:
            raise GraphError("batch has no node features")
        ctx = self.context(bg)
        x = bg.graph.features
        for layer in self.sequence():
            x = layer.forward(x, ctx, train)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the last forward; returns ``flat_grad``."""
        g = grad_out
        for layer in reversed(self.sequence()):
            g = layer.backward(g)
        return self.flat_grad

    def zero_grad(self) -> None:
        self.flat_grad[...] = 0.0


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


def param_count(model: Model) -> int:
    return int(model.flat.size)


def model_forward(model: Model, bg: BatchedGraph, train: bool = False) -> np.ndarray:
    return model.forward(bg, train)


def model_backward(model: Model, grad_out: np.ndarray) -> np.ndarray:
    model.zero_grad()
    return model.backward(grad_out).copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    """Write an ``.npz`` holding the spec, seed, flat parameters and BN buffers."""
    meta = {"schema": CHECKPOINT_SCHEMA, "spec": model.spec.to_dict(), "seed": model.seed}
    if extra:
        meta.update(extra)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.array(json.dumps(meta, sort_keys=True)),
            params=model.flat,
            buffers=model.buffers(),
        )


def load_checkpoint(path) -> Tuple[Model, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema')!r}")
        model = Model(ModelSpec.from_dict(meta["spec"]), meta["seed"])
        if z["params"].shape != model.flat.shape:
            raise ValueError("checkpoint parameter count does not match its spec")
        model.flat[...] = z["params"]
        model.set_buffers(z["buffers"])
    return model, meta
