"""Modality encoders, factorization networks, fusion and prediction head.

All forward functions work on batches: a modality batch is ``(B, T, d)`` and
representations are ``(B, d_u)``. Parameters live in a flat ``name -> Tensor``
dict so optimizers and checkpoints can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MODALITIES

SEQ_MODALITIES = ("A", "V")


@dataclass
class ModelConfig:
    dims: dict = field(default_factory=lambda: {"L": (8, 16), "A": (8, 16), "V": (8, 12)})
    d_u: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    mode: str = "classification"
    n_classes: int = 2
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        self.dims = {m: tuple(int(x) for x in self.dims[m]) for m in MODALITIES}
        if self.mode not in ("classification", "regression"):
            raise ValueError(f"mode must be classification|regression, got {self.mode!r}")
        if self.variant not in ("full", "no_dhf"):
            raise ValueError(f"model variant must be full|no_dhf, got {self.variant!r}")
        if self.mode == "regression" and self.n_classes != 2:
            raise ValueError("regression mode uses a 2-way distillation head")
        for m in SEQ_MODALITIES:
            if self.dims[m][1] % self.n_heads:
                raise ValueError(f"d_{m}={self.dims[m][1]} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = {m: list(v) for m, v in self.dims.items()}
        return out


@dataclass
class BranchOutput:
    reps: dict | None  # modality -> (homo, hetero, noise), None for no_dhf
    hidden: dict  # modality -> H_m
    z: Tensor
    probs: Tensor
    pred: Tensor  # (B,) regression score, or (B, C) probabilities


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    du = cfg.d_u
    ff = cfg.ff_mult * du
    dl = cfg.dims["L"][1]
    shapes: dict[str, tuple[int, ...]] = {"lang.W": (dl, dl), "lang.b": (dl,)}
    for m in SEQ_MODALITIES:
        d = cfg.dims[m][1]
        for i in range(cfg.n_layers):
            p = f"enc{m}.{i}."
            for w in ("q", "k", "v", "o"):
                shapes[p + f"W{w}"] = (d, d)
                shapes[p + f"b{w}"] = (d,)
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            shapes[p + "W1"] = (d, ff)
            shapes[p + "b1"] = (ff,)
            shapes[p + "W2"] = (ff, d)
            shapes[p + "b2"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
    for m in MODALITIES:
        shapes[f"proj{m}.W"] = (cfg.dims[m][1], du)
        shapes[f"proj{m}.b"] = (du,)
    if cfg.variant == "full":
        _mlp_shapes(shapes, "ho", du, du)
        for m in MODALITIES:
            _mlp_shapes(shapes, f"he{m}", 2 * du, du)
            _mlp_shapes(shapes, f"n{m}", du, du)
    else:
        shapes["cat.W"] = (3 * du, du)
        shapes["cat.b"] = (du,)
    shapes["head.W1"] = (du, du)
    shapes["head.b1"] = (du,)
    if cfg.mode == "classification":
        shapes["head.W2"] = (du, cfg.n_classes)
        shapes["head.b2"] = (cfg.n_classes,)
    else:
        shapes["head.Wr"] = (du, 1)
        shapes["head.br"] = (1,)
        shapes["head.bin_scale"] = (1,)
        shapes["head.bin_shift"] = (1,)
    return shapes


def _mlp_shapes(shapes, prefix, d_in, d_out):
    shapes[prefix + ".W1"] = (d_in, d_out)
    shapes[prefix + ".b1"] = (d_out,)
    shapes[prefix + ".W2"] = (d_out, d_out)
    shapes[prefix + ".b2"] = (d_out,)


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Uniform fan-in init: weights in +-sqrt(3/fan_in), affine biases in
    +-1/sqrt(fan_in); norm gains one and norm shifts zero.

    Nonzero biases matter: with zero biases an absent modality maps to the
    exact zero vector, where cosine distance has an unbounded gradient.
    """
    rng = np.random.default_rng(cfg.seed)
    shapes = _param_shapes(cfg)
    params = {}
    for name, shape in sorted(shapes.items()):
        prefix, _, leaf = name.rpartition(".")
        weight = f"{prefix}.W{leaf[1:]}"
        if leaf == "g" or leaf == "bin_scale":
            arr = np.ones(shape)
        elif len(shape) == 2:
            bound = math.sqrt(3.0 / shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif leaf.startswith("b") and weight in shapes:
            bound = 1.0 / math.sqrt(shapes[weight][0])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: dim // 2])
    return pe


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = ad.relu(linear(x, params[prefix + ".W1"], params[prefix + ".b1"]))
    return linear(h, params[prefix + ".W2"], params[prefix + ".b2"])


def encode_language(m_l, mask, params: dict) -> Tensor:
    """Masked frame mean followed by a linear layer; zero when no frame is present."""
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum(axis=1, keepdims=True)
    weights = np.where(count > 0, mask / np.maximum(count, 1.0), 0.0)
    pooled = ad.matmul(Tensor(weights[:, None, :]), m_l)
    b = pooled.shape[0]
    pooled = ad.reshape(pooled, (b, pooled.shape[-1]))
    out = linear(pooled, params["lang.W"], params["lang.b"])
    present = (count > 0).astype(np.float64)
    return ad.mul(out, Tensor(present))


def _attention(x: Tensor, q_src: Tensor, params: dict, p: str, n_heads: int) -> Tensor:
    b, t, d = x.shape
    tq = q_src.shape[1]
    dh = d // n_heads

    def heads(v, length):
        return ad.transpose(ad.reshape(v, (b, length, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(q_src, params[p + "Wq"], params[p + "bq"]), tq)
    k = heads(linear(x, params[p + "Wk"], params[p + "bk"]), t)
    v = heads(linear(x, params[p + "Wv"], params[p + "bv"]), t)
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    return linear(ctx, params[p + "Wo"], params[p + "bo"])


def _affine_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), g), b)


def encode_sequence(m_seq, params: dict, modality: str, n_layers: int, n_heads: int) -> Tensor:
    """Sinusoidal positions + post-norm transformer layers; returns the last step."""
    x = ad.as_tensor(m_seq)
    _, t, d = x.shape
    x = ad.add(x, Tensor(positional_encoding(t, d)))
    for i in range(n_layers):
        p = f"enc{modality}.{i}."
        last = i == n_layers - 1
        # the final layer only needs the last position's output
        q_src = ad.take(x, (slice(None), slice(t - 1, t))) if last else x
        h = _affine_norm(ad.add(q_src, _attention(x, q_src, params, p, n_heads)),
                         params[p + "ln1.g"], params[p + "ln1.b"])
        ff = linear(ad.relu(linear(h, params[p + "W1"], params[p + "b1"])), params[p + "W2"], params[p + "b2"])
        x = _affine_norm(ad.add(h, ff), params[p + "ln2.g"], params[p + "ln2.b"])
    return ad.reshape(x, (x.shape[0], d)) if x.shape[1] == 1 else ad.take(x, (slice(None), -1))


def project(c: Tensor, params: dict, modality: str) -> Tensor:
    return linear(c, params[f"proj{modality}.W"], params[f"proj{modality}.b"])


def factorize(h: Tensor, params: dict, modality: str) -> tuple[Tensor, Tensor, Tensor]:
    """(homogeneous, heterogeneous, noise) representations of one modality."""
    homo = mlp(h, params, "ho")
    hetero = mlp(ad.concat([h, homo], axis=-1), params, f"he{modality}")
    noise = mlp(h, params, f"n{modality}")
    return homo, hetero, noise


def fuse(reps: dict) -> Tensor:
    """Sum of homogeneous and heterogeneous parts minus the noise parts."""
    z = None
    for m in MODALITIES:
        homo, hetero, noise = reps[m]
        term = ad.sub(ad.add(homo, hetero), noise)
        z = term if z is None else ad.add(z, term)
    return z


def head(z: Tensor, params: dict, mode: str) -> tuple[Tensor, Tensor]:
    """Return ``(probs, pred)``.

    Regression uses a shared trunk with a scalar score and a 2-way softmax
    obtained by a learned soft threshold on that score.
    """
    h = ad.relu(linear(z, params["head.W1"], params["head.b1"]))
    if mode == "classification":
        probs = ad.softmax(linear(h, params["head.W2"], params["head.b2"]), axis=-1)
        return probs, probs
    score = linear(h, params["head.Wr"], params["head.br"])
    logit = ad.add(ad.mul(score, params["head.bin_scale"]), params["head.bin_shift"])
    probs = ad.softmax(ad.concat([Tensor(np.zeros(logit.shape)), logit], axis=-1), axis=-1)
    return probs, ad.reshape(score, (score.shape[0],))


class FSRFModel:
    """Shared network used by both distillation branches."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        expected = _param_shapes(config)
        if set(expected) != set(self.params):
            raise ValueError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ValueError(f"parameter {name}: shape {self.params[name].shape} != {shape}")

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def encode(self, feats: dict, masks: dict) -> dict[str, Tensor]:
        cfg, params = self.config, self.params
        hidden = {"L": project(encode_language(Tensor(feats["L"]), masks["L"], params), params, "L")}
        for m in SEQ_MODALITIES:
            c = encode_sequence(Tensor(feats[m]), params, m, cfg.n_layers, cfg.n_heads)
            hidden[m] = project(c, params, m)
        return hidden

    def forward(self, feats: dict, masks: dict) -> BranchOutput:
        params = self.params
        hidden = self.encode(feats, masks)
        if self.config.variant == "full":
            reps = {m: factorize(hidden[m], params, m) for m in MODALITIES}
            z = fuse(reps)
        else:
            reps = None
            cat = ad.concat([hidden[m] for m in MODALITIES], axis=-1)
            z = linear(cat, params["cat.W"], params["cat.b"])
        probs, pred = head(z, params, self.config.mode)
        return BranchOutput(reps, hidden, z, probs, pred)

    def copy(self) -> FSRFModel:
        return FSRFModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
        )
