"""Feature-sequence records, the CAFW file format and synthetic data.

A CAFW file stores one clip-feature sequence::

    offset  size   field
    0       4      magic b"CAFW"
    4       2      u16 version (1)
    6       4      u32 M (clips)
    10      4      u32 D (feature width)
    14      1      u8 has_score
    15      4*M*D  float32 clip features, row-major
    ...     4      float32 score (only if has_score)

All integers and floats are little-endian. A dataset directory holds one
CAFW file per record plus ``manifest.json`` listing each record's path,
score, split and diagnostic metadata.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IngestionError

MAGIC = b"CAFW"
VERSION = 1
_HEADER = struct.Struct("<4sHIIB")
MANIFEST_NAME = "manifest.json"

# Clip counts used per benchmark when importing real backbone features.
CLIP_COUNTS = {"rg": 68, "fisv": 124, "logo": 48}
SYNTHETIC_RANGE = (0.0, 25.0)


@dataclass
class FeatureSequence:
    """An ``M x D`` sequence of clip features with an optional score."""

    clips: np.ndarray
    score: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clips = np.asarray(self.clips)
        if self.clips.ndim != 2:
            raise ConfigError(f"clips must be 2-D (M, D), got shape {self.clips.shape}")
        m, d = self.clips.shape
        if m < 2 or d < 1:
            raise ConfigError(f"need M >= 2 and D >= 1, got M={m}, D={d}")
        if not np.all(np.isfinite(self.clips)):
            raise ConfigError("clip features contain non-finite values")
        if self.score is not None and not math.isfinite(self.score):
            raise ConfigError("score is not finite")

    @property
    def M(self):
        return self.clips.shape[0]

    @property
    def D(self):
        return self.clips.shape[1]


@dataclass
class DatasetSplit:
    train: list
    test: list
    s_min: float
    s_max: float

    def __post_init__(self):
        if not self.s_min < self.s_max:
            raise ConfigError(f"score range must satisfy s_min < s_max, got [{self.s_min}, {self.s_max}]")
        if {id(s) for s in self.train} & {id(s) for s in self.test}:
            raise ConfigError("train and test splits share records")
        for seq in list(self.train) + list(self.test):
            if seq.score is not None and not self.s_min <= seq.score <= self.s_max:
                raise ConfigError(f"score {seq.score} outside [{self.s_min}, {self.s_max}]")

    def arrays(self, which):
        """Stack one split into ``(X[N, M, D], y[N])`` float64 arrays."""
        records = self.train if which == "train" else self.test
        if not records:
            return np.zeros((0, 0, 0)), np.zeros(0)
        X = np.stack([np.asarray(r.clips, dtype=np.float64) for r in records])
        y = np.array([np.nan if r.score is None else r.score for r in records], dtype=np.float64)
        return X, y


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted causal/confounder generator.

    Causal clips carry a latent quality ``u`` that sets the score; context
    clips carry a per-video background vector. A discrete confounder adds a
    per-level offset to every clip (weaker on causal clips) and, in the
    train split, ``confound_strength * g(c)`` to the score, where ``g``
    spans ``[-confound_scale, confound_scale]`` score points.
    """

    M: int = 16
    D: int = 8
    causal_fraction: float = 0.25
    confounder_levels: int = 3
    confound_strength: float = 2.0
    confound_scale: float = 2.5
    shift: bool = True
    seed: int = 0
    n_train: int = 256
    n_test: int = 256
    clip_noise: float = 0.5
    context_scale: float = 0.2
    offset_scale: float = 0.6
    causal_offset_scale: float = 0.2
    quality_scale: float = 4.0
    score_noise: float = 1.0

    def validate(self):
        if not 0.0 < self.causal_fraction <= 1.0:
            raise ConfigError(f"causal_fraction must lie in (0, 1], got {self.causal_fraction}")
        if self.confounder_levels < 2:
            raise ConfigError(f"confounder_levels must be >= 2, got {self.confounder_levels}")
        if self.M < 2 or self.D < 1:
            raise ConfigError(f"need M >= 2 and D >= 1, got M={self.M}, D={self.D}")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ConfigError("need at least one record")
        if self.confound_strength < 0:
            raise ConfigError("confound_strength must be non-negative")
        for name in ("confound_scale", "clip_noise", "context_scale", "offset_scale", "causal_offset_scale",
                     "quality_scale", "score_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def n_causal(self):
        return min(self.M, math.ceil(self.causal_fraction * self.M - 1e-12))

    @classmethod
    def from_mapping(cls, mapping):
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec field(s): {', '.join(sorted(unknown))}")
        spec = cls(**mapping)
        spec.validate()
        return spec


def confounder_effect(c, levels, scale=1.0):
    """Centred score effect ``g(c)`` in ``[-scale, scale]`` of confounder level ``c``."""
    return scale * (2.0 * c / (levels - 1) - 1.0)


def generate_synthetic(spec):
    """Deterministically generate a train/test split from ``spec``.

    ``meta`` on every record carries the confounder id and the planted
    causal clip indices; these are diagnostics and never model inputs.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    structure_ss, train_ss, test_ss = root.spawn(3)
    srng = np.random.default_rng(structure_ss)
    D, L = spec.D, spec.confounder_levels
    causal_marker = srng.normal(size=D)
    context_marker = srng.normal(size=D)
    quality_dir = srng.normal(size=D)
    quality_dir /= np.linalg.norm(quality_dir)
    offsets = spec.offset_scale * srng.normal(size=(L, D))
    lo, hi = SYNTHETIC_RANGE

    def make(n, rng, confounded_scores, balanced):
        u = rng.random(n)
        score = 2.5 + 20.0 * u + spec.score_noise * rng.normal(size=n)
        if balanced:
            # Levels are permuted within blocks of consecutive score ranks so
            # the confounder carries no information about the score.
            order = np.argsort(score, kind="mergesort")
            c = np.empty(n, dtype=np.int64)
            for start in range(0, n, L):
                block = order[start:start + L]
                c[block] = rng.permutation(L)[: len(block)]
        else:
            c = rng.integers(0, L, size=n)
        if confounded_scores:
            score = score + spec.confound_strength * confounder_effect(c, L, spec.confound_scale)
        score = np.clip(score, lo, hi)
        records = []
        for i in range(n):
            causal = np.sort(rng.choice(spec.M, size=spec.n_causal, replace=False))
            is_causal = np.zeros(spec.M, dtype=bool)
            is_causal[causal] = True
            ctx = spec.context_scale * rng.normal(size=D)
            clips = np.where(
                is_causal[:, None],
                causal_marker + spec.quality_scale * (u[i] - 0.5) * quality_dir
                + spec.causal_offset_scale * offsets[c[i]],
                context_marker + ctx + offsets[c[i]],
            )
            clips = clips + spec.clip_noise * rng.normal(size=(spec.M, D))
            meta = {"dataset": "synthetic", "confounder": int(c[i]),
                    "causal_clips": [int(k) for k in causal]}
            records.append(FeatureSequence(clips.astype(np.float32),
                                           float(np.float32(score[i])), meta))
        return records

    train = make(spec.n_train, np.random.default_rng(train_ss), spec.confound_strength > 0, False)
    test = make(spec.n_test, np.random.default_rng(test_ss),
                spec.confound_strength > 0 and not spec.shift, spec.shift)
    return DatasetSplit(train, test, lo, hi)


def causal_indicator(seq):
    """Boolean per-clip vector of planted causal clips (synthetic only)."""
    flags = np.zeros(seq.M, dtype=bool)
    flags[list(seq.meta.get("causal_clips", []))] = True
    return flags


# -- CAFW encoding -------------------------------------------------------------


def encode_sequence(seq):
    clips = np.ascontiguousarray(seq.clips, dtype="<f4")
    has_score = seq.score is not None
    parts = [_HEADER.pack(MAGIC, VERSION, clips.shape[0], clips.shape[1], int(has_score)),
             clips.tobytes()]
    if has_score:
        parts.append(struct.pack("<f", seq.score))
    return b"".join(parts)


def decode_sequence(buf, path=None):
    """Parse one CAFW payload into ``(clips, score)``."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'CAFW'", offset=0, path=path)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf), path=path)
    _, version, m, d, has_score = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=path)
    if has_score not in (0, 1):
        raise FormatError(f"has_score flag must be 0 or 1, got {has_score}", offset=14, path=path)
    payload = 4 * m * d
    need = _HEADER.size + payload + 4 * has_score
    if len(buf) < need:
        raise FormatError(f"truncated payload, need {need} bytes, have {len(buf)}",
                          offset=len(buf), path=path)
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", offset=need, path=path)
    clips = np.frombuffer(buf, dtype="<f4", count=m * d, offset=_HEADER.size).reshape(m, d)
    score = None
    if has_score:
        score = float(struct.unpack_from("<f", buf, _HEADER.size + payload)[0])
    return clips.astype(np.float32), score


def write_features(split, path):
    """Write ``split`` as CAFW files plus a manifest under directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for name, seqs in (("train", split.train), ("test", split.test)):
        if seqs:
            (root / name).mkdir(exist_ok=True)
        for i, seq in enumerate(seqs):
            rel = f"{name}/{i:05d}.cafw"
            (root / rel).write_bytes(encode_sequence(seq))
            records.append({"path": rel, "score": seq.score, "split": name, "meta": seq.meta})
    manifest = {"format": "CAFW", "version": VERSION, "s_min": split.s_min,
                "s_max": split.s_max, "records": records}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root / MANIFEST_NAME


def read_features(path):
    """Inverse of :func:`write_features`; raises before returning any data."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME if root.is_dir() else root
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise IngestionError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", offset=exc.pos,
                          path=manifest_path) from None
    splits = {"train": [], "test": []}
    for rec in manifest.get("records", []):
        file = root / rec["path"]
        try:
            buf = file.read_bytes()
        except FileNotFoundError:
            raise IngestionError(f"feature file not found: {file}") from None
        clips, score = decode_sequence(buf, path=file)
        if rec.get("split") not in splits:
            raise FormatError(f"unknown split {rec.get('split')!r}", path=manifest_path)
        splits[rec["split"]].append(FeatureSequence(clips, score, dict(rec.get("meta", {}))))
    return DatasetSplit(splits["train"], splits["test"], float(manifest["s_min"]),
                        float(manifest["s_max"]))


# -- external features ---------------------------------------------------------


def fit_length(clips, M):
    """Truncate to the first ``M`` clips, or tile cyclically up to ``M``."""
    n = clips.shape[0]
    if n >= M:
        return clips[:M]
    return clips[np.arange(M) % n]


def _load_manifest(manifest):
    manifest = Path(manifest)
    if not manifest.exists():
        raise IngestionError(f"manifest not found: {manifest}")
    if manifest.suffix.lower() == ".csv":
        with manifest.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return rows, {}
    data = json.loads(manifest.read_text())
    if isinstance(data, list):
        return data, {}
    return data.get("records", []), data


def _load_external(file):
    if file.suffix == ".cafw":
        clips, _ = decode_sequence(file.read_bytes(), path=file)
        return clips
    arr = np.load(file)
    if arr.ndim != 2:
        raise IngestionError(f"{file}: expected a 2-D (clips, D) array, got shape {arr.shape}")
    return arr


def import_external(directory, manifest, M=CLIP_COUNTS["rg"], s_min=None, s_max=None):
    """Load pre-extracted clip features listed in ``manifest``.

    Each manifest record names a ``path`` (``.npy`` or ``.cafw``, relative to
    ``directory``), a ``score`` and a ``split``; an optional ``category`` is
    kept in ``meta``. Sequences are cut or tiled to ``M`` clips.
    """
    directory = Path(directory)
    rows, header = _load_manifest(manifest)
    if not rows:
        raise IngestionError(f"manifest {manifest} lists no records")
    splits = {"train": [], "test": []}
    width = None
    scores = []
    for row in rows:
        file = directory / row["path"]
        if not file.exists():
            raise IngestionError(f"feature file not found: {file}")
        clips = _load_external(file)
        if width is None:
            width = clips.shape[1]
        elif clips.shape[1] != width:
            raise IngestionError(f"{file}: feature width {clips.shape[1]} differs from {width}")
        split = str(row.get("split", "train")).strip().lower()
        if split not in splits:
            raise IngestionError(f"{file}: unknown split {split!r}")
        score = row.get("score")
        score = None if score in (None, "") else float(score)
        if score is not None:
            scores.append(score)
        meta = {"dataset": header.get("dataset", "external"), "source": str(row["path"])}
        if row.get("category"):
            meta["category"] = str(row["category"])
        splits[split].append(FeatureSequence(fit_length(np.asarray(clips, np.float32), M), score, meta))
    lo = s_min if s_min is not None else header.get("s_min", min(scores) if scores else None)
    hi = s_max if s_max is not None else header.get("s_max", max(scores) if scores else None)
    if lo is None or hi is None or not float(lo) < float(hi):
        raise ConfigError("score range is degenerate; pass s_min/s_max explicitly")
    return DatasetSplit(splits["train"], splits["test"], float(lo), float(hi))
