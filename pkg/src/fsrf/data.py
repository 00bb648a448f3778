"""Datasets, manifest I/O, synthetic generation and modality masking.

Every sample always carries all three modalities as ``T_m x d_m`` matrices.
Missing content is represented by zero rows plus ``False`` in the frame mask,
never by dropping a modality from the structure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MODALITIES: tuple[str, ...] = ("L", "A", "V")
FULL_SET = frozenset(MODALITIES)
# the six incomplete inter-modality conditions, in table order
INCOMPLETE_SETS: tuple[frozenset, ...] = (
    frozenset("L"),
    frozenset("A"),
    frozenset("V"),
    frozenset("LA"),
    frozenset("LV"),
    frozenset("AV"),
)
MRM_RATIOS: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
MRM_MAX_REDRAWS = 8


class DatasetError(ValueError):
    pass


def condition_name(available: Iterable[str]) -> str:
    """``{'L','A'}`` -> ``"{l,a}"`` in L, A, V order."""
    avail = set(available)
    return "{" + ",".join(m.lower() for m in MODALITIES if m in avail) + "}"


def parse_condition(text: str) -> frozenset:
    letters = [c.upper() for c in text if c.isalpha()]
    if not letters or any(c not in MODALITIES for c in letters):
        raise DatasetError(f"bad modality condition {text!r}")
    return frozenset(letters)


@dataclass(frozen=True)
class MissingPattern:
    intra_ratio: float = 0.0
    available_set: frozenset = FULL_SET

    def __post_init__(self):
        if not 0.0 <= self.intra_ratio <= 1.0:
            raise ValueError(f"intra_ratio must be in [0, 1], got {self.intra_ratio}")
        avail = frozenset(self.available_set)
        if not avail:
            raise ValueError("available_set must be nonempty")
        if not avail <= FULL_SET:
            raise ValueError(f"unknown modalities in {sorted(avail)}")
        object.__setattr__(self, "available_set", avail)

    @property
    def mode(self) -> str:
        return "inter" if self.available_set != FULL_SET else "intra"


@dataclass
class MultimodalSample:
    id: str
    features: dict[str, np.ndarray]
    label: float
    frame_mask: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for m in MODALITIES:
            if m not in self.features:
                raise DatasetError(f"sample {self.id}: modality {m} missing")
            feats = np.asarray(self.features[m], dtype=np.float64)
            if feats.ndim != 2:
                raise DatasetError(f"sample {self.id}: {m} features must be 2-D")
            self.features[m] = feats
            if m not in self.frame_mask:
                self.frame_mask[m] = np.ones(feats.shape[0], dtype=bool)
            elif len(self.frame_mask[m]) != feats.shape[0]:
                raise DatasetError(f"sample {self.id}: {m} frame_mask length mismatch")

    def copy(self) -> MultimodalSample:
        return MultimodalSample(
            self.id,
            {m: f.copy() for m, f in self.features.items()},
            self.label,
            {m: k.copy() for m, k in self.frame_mask.items()},
        )


@dataclass
class Dataset:
    """In-memory dataset. ``dims`` maps modality to ``(T, d)``."""

    name: str
    dims: dict[str, tuple[int, int]]
    label_kind: str
    samples: list[MultimodalSample]
    factors: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.label_kind not in ("regression", "binary"):
            raise DatasetError(f"label_kind must be regression|binary, got {self.label_kind!r}")
        self._arrays = None

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self):
        """Stacked ``(features, masks, labels)``; features[m] has shape (N, T, d)."""
        if self._arrays is None:
            feats = {
                m: np.stack([s.features[m] for s in self.samples])
                if self.samples
                else np.zeros((0,) + tuple(self.dims[m]))
                for m in MODALITIES
            }
            masks = {
                m: np.stack([s.frame_mask[m] for s in self.samples])
                if self.samples
                else np.zeros((0, self.dims[m][0]), dtype=bool)
                for m in MODALITIES
            }
            labels = np.array([s.label for s in self.samples], dtype=np.float64)
            self._arrays = (feats, masks, labels)
        return self._arrays

    def subset(self, indices: Sequence[int]) -> Dataset:
        factors = None
        if self.factors is not None:
            factors = {k: v[np.asarray(indices, dtype=int)] for k, v in self.factors.items()}
        return Dataset(
            self.name, dict(self.dims), self.label_kind,
            [self.samples[i] for i in indices], factors,
        )

    def binary_labels(self) -> np.ndarray:
        labels = self.arrays()[2]
        return (labels > 0).astype(int) if self.label_kind == "regression" else labels.astype(int)


def split_dataset(ds: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded random train/val/test split."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be 3 nonnegative values summing to 1: {fractions}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(fractions[0] * len(ds)))
    n_val = int(round(fractions[1] * len(ds)))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(ds.subset(sorted(p.tolist())) for p in parts)


# ---------------------------------------------------------------- masking


def drop_count(p: float, length: int) -> int:
    """round(p * length), halves rounded up."""
    return int(math.floor(p * length + 0.5))


def apply_intra_missing(sample: MultimodalSample, p: float, rng: np.random.Generator) -> MultimodalSample:
    """Zero-fill ``round(p*T_m)`` uniformly chosen frames in every modality."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    out = sample.copy()
    for m in MODALITIES:
        length = out.features[m].shape[0]
        k = drop_count(p, length)
        if k == 0:
            continue
        idx = rng.choice(length, size=k, replace=False)
        out.features[m][idx] = 0.0
        out.frame_mask[m][idx] = False
    return out


def apply_inter_missing(sample: MultimodalSample, available_set: Iterable[str]) -> MultimodalSample:
    avail = frozenset(available_set)
    if not avail:
        raise ValueError("available_set must be nonempty")
    if not avail <= FULL_SET:
        raise ValueError(f"unknown modalities in {sorted(avail)}")
    out = sample.copy()
    for m in MODALITIES:
        if m not in avail:
            out.features[m][:] = 0.0
            out.frame_mask[m][:] = False
    return out


def apply_pattern(sample: MultimodalSample, pattern: MissingPattern, rng: np.random.Generator) -> MultimodalSample:
    out = sample
    if pattern.available_set != FULL_SET:
        out = apply_inter_missing(out, pattern.available_set)
    if pattern.intra_ratio > 0:
        out = apply_intra_missing(out, pattern.intra_ratio, rng)
    return out if out is not sample else sample.copy()


_PROPER_SUBSETS = INCOMPLETE_SETS


def draw_mrm_pattern(rng: np.random.Generator) -> MissingPattern:
    """One Modality Random Missing draw: intra or inter mode with equal odds."""
    if rng.random() < 0.5:
        return MissingPattern(intra_ratio=MRM_RATIOS[rng.integers(len(MRM_RATIOS))])
    return MissingPattern(available_set=_PROPER_SUBSETS[rng.integers(len(_PROPER_SUBSETS))])


def draw_mrm_pair(rng: np.random.Generator) -> tuple[MissingPattern, MissingPattern]:
    p = draw_mrm_pattern(rng)
    q = draw_mrm_pattern(rng)
    for _ in range(MRM_MAX_REDRAWS):
        if q != p:
            break
        q = draw_mrm_pattern(rng)
    return p, q


def apply_mrm(sample: MultimodalSample, rng: np.random.Generator) -> tuple[MultimodalSample, MultimodalSample]:
    """Two differently masked variants ``(S_p, S_q)`` of a complete sample."""
    p, q = draw_mrm_pair(rng)
    return apply_pattern(sample, p, rng), apply_pattern(sample, q, rng)


def mask_batch(
    feats: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    patterns: Sequence[MissingPattern],
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Array form of :func:`apply_pattern` over a stacked batch.

    Consumes the generator exactly like per-sample ``apply_pattern`` calls in
    batch order, so both paths give identical results under one seed.
    """
    out_f = {m: feats[m].copy() for m in MODALITIES}
    out_k = {m: masks[m].copy() for m in MODALITIES}
    for i, pat in enumerate(patterns):
        for m in MODALITIES:
            if m not in pat.available_set:
                out_f[m][i] = 0.0
                out_k[m][i] = False
        if pat.intra_ratio > 0:
            for m in MODALITIES:
                length = out_f[m].shape[1]
                k = drop_count(pat.intra_ratio, length)
                if k == 0:
                    continue
                idx = rng.choice(length, size=k, replace=False)
                out_f[m][i, idx] = 0.0
                out_k[m][i, idx] = False
    return out_f, out_k


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    n_samples: int = 2000
    seq_len: dict = field(default_factory=lambda: {"L": 8, "A": 8, "V": 8})
    feat_dim: dict = field(default_factory=lambda: {"L": 16, "A": 16, "V": 12})
    shared_dim: int = 4
    specific_dim: int = 4
    noise_dim: int = 4
    # how strongly each modality expresses the shared (sentiment) factor
    strength: dict = field(default_factory=lambda: {"L": 1.0, "A": 0.6, "V": 0.4})
    noise_scale: float = 0.5
    frame_jitter: float = 1.0
    label_noise: float = 0.1
    label_kind: str = "binary"
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        for key in ("n_samples", "shared_dim", "specific_dim", "noise_dim"):
            if int(getattr(self, key)) <= 0:
                raise ValueError(f"{key} must be positive")
        for m in MODALITIES:
            if int(self.seq_len[m]) <= 0 or int(self.feat_dim[m]) <= 0:
                raise ValueError(f"dims for modality {m} must be positive")
        if self.label_kind not in ("regression", "binary"):
            raise ValueError(f"label_kind must be regression|binary, got {self.label_kind!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> SyntheticSpec:
        known = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        unknown = set(raw) - set(known)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**known)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Three-way latent model: shared sentiment ``s``, specific ``u_m``, noise ``n_m``.

    Frame t of modality m is ``tanh(W_m [a_m s; u_m]) + B_m n_m + jitter * e_t``.
    The label is a noisy projection of ``s`` through a sign-preserving squashing.
    """
    rng = np.random.default_rng(spec.seed)
    n, ks, ku, kn = spec.n_samples, spec.shared_dim, spec.specific_dim, spec.noise_dim

    mix, noise_maps = {}, {}
    for m in MODALITIES:
        d = spec.feat_dim[m]
        mix[m] = rng.standard_normal((d, ks + ku)) / math.sqrt(ks + ku) * 2.0
        noise_maps[m] = rng.standard_normal((d, kn)) / math.sqrt(kn)
    direction = rng.standard_normal(ks)
    direction /= np.linalg.norm(direction)

    s = rng.standard_normal((n, ks))
    factors = {"s": s}
    feats = {}
    for m in MODALITIES:
        u = rng.standard_normal((n, ku))
        nz = rng.standard_normal((n, kn))
        factors[f"u_{m}"] = u
        factors[f"n_{m}"] = nz
        latent = np.concatenate([spec.strength[m] * s, u], axis=1)
        base = np.tanh(latent @ mix[m].T)
        offset = spec.noise_scale * (nz @ noise_maps[m].T)
        jitter = spec.frame_jitter * rng.standard_normal((n, spec.seq_len[m], spec.feat_dim[m]))
        feats[m] = (base + offset)[:, None, :] + jitter

    score = s @ direction + spec.label_noise * rng.standard_normal(n)
    if spec.label_kind == "binary":
        labels = (score > 0).astype(np.float64)
    else:
        labels = 3.0 * np.tanh(score)

    width = len(str(n - 1))
    samples = [
        MultimodalSample(f"s{i:0{width}d}", {m: feats[m][i] for m in MODALITIES}, float(labels[i]))
        for i in range(n)
    ]
    dims = {m: (spec.seq_len[m], spec.feat_dim[m]) for m in MODALITIES}
    return Dataset(spec.name, dims, spec.label_kind, samples, factors)


# ---------------------------------------------------------------- manifest I/O


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``manifest.json`` plus one headerless CSV per sample and modality."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for s in ds.samples:
        files = {}
        for m in MODALITIES:
            rel = f"features/{s.id}_{m}.csv"
            np.savetxt(out / rel, s.features[m], delimiter=",", fmt="%.17g")
            files[m] = rel
        label = int(s.label) if ds.label_kind == "binary" else float(s.label)
        records.append({"id": s.id, "files": files, "label": label})
    manifest = {
        "name": ds.name,
        "modalities": {m: {"T": int(ds.dims[m][0]), "d": int(ds.dims[m][1])} for m in MODALITIES},
        "label_kind": ds.label_kind,
        "samples": records,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
        dims = {m: (int(manifest["modalities"][m]["T"]), int(manifest["modalities"][m]["d"]))
                for m in MODALITIES}
        label_kind = manifest["label_kind"]
        records = manifest.get("samples", [])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc

    root = path.parent
    samples = []
    for rec in records:
        feats = {}
        for m in MODALITIES:
            fpath = root / rec["files"][m]
            if not fpath.exists():
                raise FileNotFoundError(f"feature file not found: {fpath}")
            arr = np.loadtxt(fpath, delimiter=",", ndmin=2, dtype=np.float64)
            if arr.shape != dims[m]:
                raise DatasetError(
                    f"sample {rec['id']} modality {m}: shape {arr.shape} != declared {dims[m]}"
                )
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"sample {rec['id']} modality {m}: non-finite values")
            feats[m] = arr
        samples.append(MultimodalSample(str(rec["id"]), feats, float(rec["label"])))
    return Dataset(manifest.get("name", path.parent.name), dims, label_kind, samples)
