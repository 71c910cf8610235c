"""The five model families: linear, maxent, mlp, mlp++ and ciso.

The ciso family is an environmental encoder (the MLP trunk minus its output
layer) whose representation is prepended as a single token to the species
token sequence; three full self-attention blocks (pre-layer-norm, GELU
feed-forward) mix the sequence, and a per-species linear readout turns each
species token into a suitability score. No positional encodings are used, so
the architecture is species-permutation equivariant by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .dataio import NormStats
from .encoding import EmbeddingTables, assign_states
from .features import MaxentConfig, expand
from .numerics import Tensor

FAMILIES = ("linear", "maxent", "mlp", "mlp++", "ciso")

CHECKPOINT_MAGIC = b"CISOCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    """Architecture and hyperparameters for any family."""

    family: str
    n_species: int
    n_env: int
    hidden_dim: int = 256
    mlp_hidden: tuple[int, ...] | None = None  # default: (hidden_dim, hidden_dim)
    transformer_layers: int = 3
    heads: int = 4
    n_b: int = 4
    encoding: str = "discrete"
    dropout: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.n_b < 1:
            raise ValueError("n_b must be >= 1")
        if self.mlp_hidden is not None:
            self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)

    @property
    def trunk_widths(self) -> tuple[int, ...]:
        return self.mlp_hidden if self.mlp_hidden is not None else (self.hidden_dim, self.hidden_dim)

    @property
    def uses_states(self) -> bool:
        return self.family in ("mlp++", "ciso")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("mlp_hidden") is not None:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)


def mlp_widths_for_depth(depth: int, hidden_dim: int = 256) -> tuple[int, ...]:
    """Hidden widths for a depth-ablation MLP; widths double past 3 layers."""
    if depth < 2:
        raise ValueError("an MLP needs at least 2 layers")
    width = hidden_dim * (2 if depth > 3 else 1)
    return (width,) * (depth - 1)


def _linear_params(rng, fan_in: int, fan_out: int, name: str, gain: float = 1.0) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True, name=f"{name}.w")
    b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
    return w, b


def _ln_params(rng, dim: int, name: str) -> tuple[Tensor, Tensor]:
    g = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")
    b = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")
    return g, b


class Model:
    """A family instance: a named parameter dict plus a forward pass."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}

    def _add(self, *tensors: Tensor) -> None:
        for t in tensors:
            self.params[t.name] = t

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, env: np.ndarray, codes=None, rates=None, training=False, rng=None) -> Tensor:
        raise NotImplementedError

    def predict(self, env: np.ndarray, codes=None, rates=None, batch_size: int = 512) -> np.ndarray:
        """Tape-free batched inference; returns a (N, C) numpy matrix."""
        if env.shape[0] == 0:
            return np.zeros((0, self.spec.n_species))
        outs = []
        for start in range(0, env.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            c = codes[sl] if codes is not None else None
            r = rates[sl] if rates is not None else None
            outs.append(self.forward(env[sl], c, r).values)
        return np.concatenate(outs, axis=0)


class LinearModel(Model):
    """sigmoid(W x + b) over the normalized environmental vector."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        w, b = _linear_params(rng, spec.n_env, spec.n_species, "out")
        self._add(w, b)

    def forward(self, env, codes=None, rates=None, training=False, rng=None) -> Tensor:
        x = Tensor(np.atleast_2d(env))
        return nm.sigmoid(nm.add(nm.matmul(x, self.params["out.w"]), self.params["out.b"]))


class MaxentModel(Model):
    """Linear model over the Maxent feature expansion."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, maxent_config: MaxentConfig):
        super().__init__(spec)
        self.maxent_config = maxent_config
        w, b = _linear_params(rng, maxent_config.n_features, spec.n_species, "out")
        self._add(w, b)

    def forward(self, env, codes=None, rates=None, training=False, rng=None) -> Tensor:
        x = Tensor(expand(np.atleast_2d(env), self.maxent_config))
        return nm.sigmoid(nm.add(nm.matmul(x, self.params["out.w"]), self.params["out.b"]))


def _trunk(rng, widths: tuple[int, ...], n_in: int, prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers = []
    fan_in = n_in
    for i, width in enumerate(widths):
        w, b = _linear_params(rng, fan_in, width, f"{prefix}{i}", gain=np.sqrt(2.0))
        # small positive bias keeps ReLU units off the kink at init
        b.values[:] = 0.01
        layers.append((w, b))
        fan_in = width
    return layers


def _run_trunk(layers, x: Tensor) -> Tensor:
    for w, b in layers:
        x = nm.relu(nm.add(nm.matmul(x, w), b))
    return x


class MLPModel(Model):
    """ReLU trunk plus a final linear layer and sigmoid."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, n_in: int | None = None):
        super().__init__(spec)
        widths = spec.trunk_widths
        self.trunk = _trunk(rng, widths, n_in if n_in is not None else spec.n_env, "trunk")
        for w, b in self.trunk:
            self._add(w, b)
        w, b = _linear_params(rng, widths[-1], spec.n_species, "out")
        self._add(w, b)

    def _input(self, env, codes, rates) -> np.ndarray:
        return np.atleast_2d(env)

    def forward(self, env, codes=None, rates=None, training=False, rng=None) -> Tensor:
        x = Tensor(self._input(env, codes, rates))
        h = _run_trunk(self.trunk, x)
        return nm.sigmoid(nm.add(nm.matmul(h, self.params["out.w"]), self.params["out.b"]))


class MLPPlusModel(MLPModel):
    """The MLP with per-species one-hot state inputs appended to the env vector.

    Each species contributes n_b + 2 input entries (unknown, absent, bins).
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.state_width = spec.n_b + 2
        n_in = spec.n_env + spec.n_species * self.state_width
        super().__init__(spec, rng, n_in=n_in)

    def _input(self, env, codes, rates) -> np.ndarray:
        env = np.atleast_2d(env)
        if codes is None:
            codes = np.zeros((env.shape[0], self.spec.n_species), dtype=np.int64)
        onehot = np.eye(self.state_width)[codes]  # (B, C, n_b + 2)
        return np.concatenate([env, onehot.reshape(env.shape[0], -1)], axis=1)


class TransformerBlock:
    """Pre-LN residual block: full self-attention then a GELU feed-forward.

    Each of the `heads` attention heads runs at the full model width; their
    concatenation is projected back to the model width.
    """

    def __init__(self, rng, dim: int, heads: int, dropout: float, name: str):
        self.dim = dim
        self.heads = heads
        self.dropout = dropout
        inner = heads * dim
        self.ln1 = _ln_params(rng, dim, f"{name}.ln1")
        self.wq, self.bq = _linear_params(rng, dim, inner, f"{name}.q")
        self.wk, self.bk = _linear_params(rng, dim, inner, f"{name}.k")
        self.wv, self.bv = _linear_params(rng, dim, inner, f"{name}.v")
        self.wo, self.bo = _linear_params(rng, inner, dim, f"{name}.o")
        self.ln2 = _ln_params(rng, dim, f"{name}.ln2")
        self.wf1, self.bf1 = _linear_params(rng, dim, 4 * dim, f"{name}.ff1")
        self.wf2, self.bf2 = _linear_params(rng, 4 * dim, dim, f"{name}.ff2")

    def tensors(self) -> list[Tensor]:
        out = list(self.ln1)
        out += [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
        out += list(self.ln2)
        out += [self.wf1, self.bf1, self.wf2, self.bf2]
        return out

    def _heads(self, x: Tensor, batch: int, length: int) -> Tensor:
        x = nm.reshape(x, (batch, length, self.heads, self.dim))
        return nm.transpose(x, (0, 2, 1, 3))

    def attention_weights(self, x: Tensor, batch: int, length: int) -> Tensor:
        """Row-stochastic attention matrix (B, heads, L, L); exposed for tests."""
        a = nm.layer_norm(x, *self.ln1)
        q = self._heads(nm.add(nm.matmul(a, self.wq), self.bq), batch, length)
        k = self._heads(nm.add(nm.matmul(a, self.wk), self.bk), batch, length)
        scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.dim))
        return nm.softmax_rows(scores)

    def forward(self, x: Tensor, training: bool, rng) -> Tensor:
        batch, length, _ = x.shape
        a = nm.layer_norm(x, *self.ln1)
        q = self._heads(nm.add(nm.matmul(a, self.wq), self.bq), batch, length)
        k = self._heads(nm.add(nm.matmul(a, self.wk), self.bk), batch, length)
        v = self._heads(nm.add(nm.matmul(a, self.wv), self.bv), batch, length)
        scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.dim))
        attn = nm.softmax_rows(scores)
        if training and self.dropout > 0:
            attn = nm.dropout(attn, self.dropout, rng)
        mix = nm.matmul(attn, v)
        mix = nm.reshape(nm.transpose(mix, (0, 2, 1, 3)), (batch, length, self.heads * self.dim))
        out = nm.add(nm.matmul(mix, self.wo), self.bo)
        if training and self.dropout > 0:
            out = nm.dropout(out, self.dropout, rng)
        x = nm.add(x, out)

        f = nm.layer_norm(x, *self.ln2)
        f = nm.gelu(nm.add(nm.matmul(f, self.wf1), self.bf1))
        f = nm.add(nm.matmul(f, self.wf2), self.bf2)
        if training and self.dropout > 0:
            f = nm.dropout(f, self.dropout, rng)
        return nm.add(x, f)


class CISOModel(Model):
    """Environmental token + species tokens through the biotic-abiotic
    transformer; suitability scores come from each species token."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        d = spec.hidden_dim
        widths = (spec.trunk_widths[:-1] + (d,)) if spec.mlp_hidden else (d, d)
        self.trunk = _trunk(rng, widths, spec.n_env, "encoder")
        for w, b in self.trunk:
            self._add(w, b)
        self.tables = EmbeddingTables(spec.n_species, d, spec.encoding, spec.n_b, rng)
        for t in self.tables.params().values():
            self._add(t)
        self.blocks = [
            TransformerBlock(rng, d, spec.heads, spec.dropout, f"block{i}")
            for i in range(spec.transformer_layers)
        ]
        for blk in self.blocks:
            self._add(*blk.tensors())
        self.ln_final = _ln_params(rng, d, "ln_final")
        self._add(*self.ln_final)
        self.readout_w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(d), size=(spec.n_species, d)), requires_grad=True, name="readout.w"
        )
        self.readout_b = Tensor(np.zeros(spec.n_species), requires_grad=True, name="readout.b")
        self._add(self.readout_w, self.readout_b)

    def forward(self, env, codes=None, rates=None, training=False, rng=None) -> Tensor:
        env = np.atleast_2d(env)
        batch = env.shape[0]
        c = self.spec.n_species
        if codes is None:
            codes = np.zeros((batch, c), dtype=np.int64)
        if rates is None:
            rates = np.zeros((batch, c))
        z = _run_trunk(self.trunk, Tensor(env))
        z = nm.reshape(z, (batch, 1, self.spec.hidden_dim))
        tokens = nm.add(self.tables.species, self.tables.state.encode(codes, rates))
        x = nm.concat([z, tokens], axis=1)
        for blk in self.blocks:
            x = blk.forward(x, training, rng)
        x = nm.layer_norm(x, *self.ln_final)
        h = nm.slice_axis(x, 1, 1, c + 1)
        logits = nm.add(nm.sum_axis(nm.mul(h, self.readout_w), -1), self.readout_b)
        return nm.sigmoid(logits)


def build_model(spec: ModelSpec, seed: int, maxent_config: MaxentConfig | None = None) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    if spec.family == "linear":
        return LinearModel(spec, rng)
    if spec.family == "maxent":
        if maxent_config is None:
            raise ValueError("maxent family requires a fitted MaxentConfig")
        return MaxentModel(spec, rng, maxent_config)
    if spec.family == "mlp":
        return MLPModel(spec, rng)
    if spec.family == "mlp++":
        return MLPPlusModel(spec, rng)
    return CISOModel(spec, rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    """Model plus everything needed to reproduce its inputs."""

    model: Model
    roster: list[str]
    norm: NormStats
    maxent_config: MaxentConfig | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(tm: TrainedModel, path: str) -> None:
    """Versioned binary container: JSON header + raw little-endian float64
    parameter blocks in a fixed order. Byte-identical for identical runs."""
    from . import __version__

    arrays = [(name, p.values) for name, p in tm.model.params.items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "toolkit_version": __version__,
        "spec": tm.model.spec.to_dict(),
        "roster": tm.roster,
        "norm": json.loads(tm.norm.to_json()),
        "maxent": json.loads(tm.maxent_config.to_json()) if tm.maxent_config else None,
        "meta": tm.meta,
        "arrays": [{"name": n, "shape": list(v.shape)} for n, v in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, v in arrays:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> TrainedModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
        spec = ModelSpec.from_dict(header["spec"])
        maxent = MaxentConfig.from_json(json.dumps(header["maxent"])) if header["maxent"] else None
        model = build_model(spec, seed=0, maxent_config=maxent)
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(n * 8)
            model.params[entry["name"]].values = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return TrainedModel(
        model=model,
        roster=list(header["roster"]),
        norm=NormStats.from_json(json.dumps(header["norm"])),
        maxent_config=maxent,
        meta=header.get("meta", {}),
    )


def states_for(
    spec: ModelSpec, targets: np.ndarray, available: np.ndarray, known: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batch state codes/rates under the model's binning config."""
    return assign_states(targets, available, known, spec.n_b)
