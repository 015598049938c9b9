"""Synthetic paired-modality corpus with controlled, systematic information
loss.

Tokens are merged pairwise into viseme classes, so the per-frame observation
destroys one bit per ambiguous position. A seeded bigram language model makes
the destroyed bit a near-deterministic function of the previous token, which
keeps the loss *systematic*: a decoder with context can recover it, and a
brute-force Viterbi over the true model certifies how recoverable the corpus
actually is. Turning the concentration knob down to ~0 removes the structure
and the same Viterbi decays to within-class chance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .models import TeacherEncoder, one_hot


class FeatureFormatError(Exception):
    """Base for feature-file decoding failures."""


class BadMagicError(FeatureFormatError):
    pass


class BadVersionError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


MAGIC = b"JPKD"
VERSION_F32 = 1
VERSION_F64 = 2

UNIFORM_KAPPA = 1e-9  # close enough to 0 that the bigram rows are uniform


@dataclass(frozen=True)
class Vocabulary:
    """Dense id layout: blank 0, content 1..V, sos V+1, eos V+2."""

    n_tokens: int = 24

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def sos_id(self) -> int:
        return self.n_tokens + 1

    @property
    def eos_id(self) -> int:
        return self.n_tokens + 2

    def content_ids(self) -> range:
        return range(1, self.n_tokens + 1)


@dataclass(frozen=True)
class VisemeMap:
    """Surjective token-id -> class-id map; index 0 of ``table`` is unused."""

    table: tuple[int, ...]
    n_classes: int

    @classmethod
    def paired(cls, n_tokens: int) -> "VisemeMap":
        """Merge tokens 2k-1 and 2k into class k (every class loses one bit)."""
        if n_tokens % 2:
            raise ValueError(f"paired map needs an even token count, got {n_tokens}")
        table = (0,) + tuple((tok + 1) // 2 for tok in range(1, n_tokens + 1))
        return cls(table=table, n_classes=n_tokens // 2)

    def __post_init__(self):
        classes = set(self.table[1:])
        if classes != set(range(1, self.n_classes + 1)):
            raise ValueError("viseme map must cover every class")
        counts = np.bincount(np.asarray(self.table[1:]))
        if counts[1:].min() < 1 or counts[1:].max() < 2:
            raise ValueError("need every class nonempty and at least one merged class")

    def project(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        return np.asarray(self.table, dtype=np.int64)[tokens]

    def class_members(self, cls_id: int) -> list[int]:
        return [tok for tok in range(1, len(self.table)) if self.table[tok] == cls_id]


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    min_len: int = 6
    max_len: int = 12
    kappa: float = 4.0
    vocab_size: int = 24

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not (1 <= self.min_len <= self.max_len):
            raise ValueError(f"bad length range {self.min_len}..{self.max_len}")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


@dataclass
class PairedSample:
    sample_id: str
    tokens: tuple[int, ...]              # ground-truth sequence y
    observations: np.ndarray             # (T, n_classes) one-hot viseme frames
    teacher_features: np.ndarray         # (T, d), stored at 32-bit precision

    def __post_init__(self):
        t = len(self.tokens)
        assert self.observations.shape[0] == t and self.teacher_features.shape[0] == t


def viseme_project(tokens, vmap: VisemeMap) -> np.ndarray:
    return vmap.project(tokens)


# ---------------------------------------------------------------------------
# bigram language model


def build_bigram_lm(seed: int, n_tokens: int, kappa: float, vmap: VisemeMap | None = None) -> np.ndarray:
    """(V+1) x V transition matrix; row 0 is sentence-initial.

    Rows pick a viseme class uniformly, then put weight w = 1 - 0.5*exp(-kappa)
    on one class member chosen by a seeded bit keyed on the previous token.
    Distinct previous tokens disagree on the bit about half the time, so the
    within-class choice is recoverable from context. Self-transitions are
    zeroed (and the row renormalized) so sequences never repeat a token, which
    keeps every target CTC-feasible at one frame per token. kappa -> 0 gives
    uniform rows; large kappa pins the class member almost surely.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if vmap is None:
        vmap = VisemeMap.paired(n_tokens)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB16A]))
    bits = rng.integers(0, 2, size=(n_tokens + 1, vmap.n_classes))
    w = 1.0 - 0.5 * np.exp(-float(kappa))

    lm = np.zeros((n_tokens + 1, n_tokens))
    members = {c: vmap.class_members(c) for c in range(1, vmap.n_classes + 1)}
    for prev in range(n_tokens + 1):
        for c in range(1, vmap.n_classes + 1):
            toks = members[c]
            if len(toks) == 1:
                lm[prev, toks[0] - 1] = 1.0
                continue
            pick = toks[bits[prev, c - 1] % len(toks)]
            for tok in toks:
                share = w if tok == pick else (1.0 - w) / (len(toks) - 1)
                lm[prev, tok - 1] = share
        lm[prev] /= vmap.n_classes
        if prev >= 1:
            lm[prev, prev - 1] = 0.0
            lm[prev] /= lm[prev].sum()
    return lm


def sample_sentence(rng: np.random.Generator, lm: np.ndarray, min_len: int, max_len: int) -> tuple[int, ...]:
    length = int(rng.integers(min_len, max_len + 1))
    n_tokens = lm.shape[1]
    prev = 0
    out = []
    for _ in range(length):
        tok = int(rng.choice(n_tokens, p=lm[prev])) + 1
        out.append(tok)
        prev = tok
    return tuple(out)


# ---------------------------------------------------------------------------
# corpus generation


def narrow_to_f32(arr: np.ndarray) -> np.ndarray:
    """Round-trip through 32-bit floats, the precision features live at on
    disk, so in-memory corpora match reloaded ones bitwise."""
    return arr.astype("<f4").astype(np.float64)


def generate_corpus(
    spec: CorpusSpec,
    lm: np.ndarray,
    vocab: Vocabulary,
    vmap: VisemeMap,
    teacher: TeacherEncoder,
) -> dict[str, list[PairedSample]]:
    """Deterministic splits of paired samples; sentences are globally unique
    across splits (resampled from the same per-sentence stream on collision).
    """
    seen: set[tuple[int, ...]] = set()
    splits: dict[str, list[PairedSample]] = {}
    for split_idx, (split, count) in enumerate(spec.split_sizes().items()):
        samples = []
        for i in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(spec.seed), seeding.CORPUS, split_idx, i])
            )
            tokens = sample_sentence(rng, lm, spec.min_len, spec.max_len)
            tries = 0
            while tokens in seen:
                tries += 1
                if tries > 200:
                    raise RuntimeError("could not draw a fresh sentence; corpus too small?")
                tokens = sample_sentence(rng, lm, spec.min_len, spec.max_len)
            seen.add(tokens)
            samples.append((f"{split}/{i:05d}", tokens))
        splits[split] = samples

    out: dict[str, list[PairedSample]] = {}
    for split, samples in splits.items():
        done: list[PairedSample] = []
        by_len: dict[int, list[int]] = {}
        for idx, (_, tokens) in enumerate(samples):
            by_len.setdefault(len(tokens), []).append(idx)
        feats: dict[int, np.ndarray] = {}
        for t_len, idxs in sorted(by_len.items()):
            ys = np.array([samples[i][1] for i in idxs])
            batch = narrow_to_f32(teacher.features(ys))
            for row, i in enumerate(idxs):
                feats[i] = batch[row]
        for idx, (sample_id, tokens) in enumerate(samples):
            obs = one_hot(vmap.project(tokens) - 1, vmap.n_classes)
            done.append(
                PairedSample(
                    sample_id=sample_id,
                    tokens=tokens,
                    observations=obs,
                    teacher_features=feats[idx],
                )
            )
        out[split] = done
    return out


# ---------------------------------------------------------------------------
# recoverability oracle


def viterbi_tokens(visemes, lm: np.ndarray, vmap: VisemeMap) -> tuple[int, ...]:
    """Best token sequence consistent with the viseme observations under the
    true bigram model (ties break toward the lower token id)."""
    candidates = [vmap.class_members(int(c)) for c in visemes]
    if not candidates:
        return ()
    n = len(candidates)
    with np.errstate(divide="ignore"):
        log_lm = np.log(lm)
    score = {tok: log_lm[0, tok - 1] for tok in candidates[0]}
    back: list[dict[int, int]] = [{}]
    for t in range(1, n):
        nxt = {}
        ptr = {}
        for tok in candidates[t]:
            best_prev, best = None, -np.inf
            for prev in candidates[t - 1]:
                s = score[prev] + log_lm[prev, tok - 1]
                if s > best:
                    best_prev, best = prev, s
            nxt[tok] = best
            ptr[tok] = best_prev
        score = nxt
        back.append(ptr)
    last = min(tok for tok in score if score[tok] == max(score.values()))
    path = [last]
    for t in range(n - 1, 0, -1):
        path.append(back[t][path[-1]])
    return tuple(reversed(path))


def viterbi_token_error_rate(samples, lm: np.ndarray, vmap: VisemeMap) -> float:
    wrong = total = 0
    for s in samples:
        decoded = viterbi_tokens(vmap.project(s.tokens), lm, vmap)
        wrong += sum(1 for a, b in zip(decoded, s.tokens) if a != b)
        total += len(s.tokens)
    return wrong / total


# ---------------------------------------------------------------------------
# feature file format


def write_features(path, arr: np.ndarray, precision: str = "f32") -> None:
    """magic | version u32 | ndim u32 | extents u32* | row-major LE payload."""
    arr = np.asarray(arr, dtype=np.float64)
    if precision == "f32":
        version, payload = VERSION_F32, arr.astype("<f4").tobytes()
    elif precision == "f64":
        version, payload = VERSION_F64, arr.astype("<f8").tobytes()
    else:
        raise ValueError(f"unknown precision {precision!r}")
    header = MAGIC + struct.pack("<II", version, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + payload)


def decode_features(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise TruncatedFileError(f"header cut short at {len(blob)} bytes")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version not in (VERSION_F32, VERSION_F64):
        raise BadVersionError(f"unsupported feature version {version}")
    if len(blob) < 12 + 4 * ndim:
        raise TruncatedFileError("extent list cut short")
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    offset = 12 + 4 * ndim
    itemsize = 4 if version == VERSION_F32 else 8
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = offset + itemsize * count
    if len(blob) < expected:
        raise TruncatedFileError(f"payload has {len(blob) - offset} of {itemsize * count} bytes")
    if len(blob) > expected:
        raise TruncatedFileError(f"{len(blob) - expected} trailing bytes after payload")
    dt = "<f4" if version == VERSION_F32 else "<f8"
    flat = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    return flat.astype(np.float64).reshape(shape)


def read_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# corpus on disk


def write_corpus(out_dir, corpus: dict[str, list[PairedSample]], meta: dict) -> Path:
    """Feature files plus one canonical-JSON manifest; re-runs are byte-stable."""
    out_dir = Path(out_dir)
    manifest: dict = dict(meta)
    manifest["format"] = "jepkd-corpus"
    manifest["format_version"] = 1
    manifest["splits"] = {}
    for split, samples in corpus.items():
        entries = []
        for s in samples:
            rel = f"features/{s.sample_id}.jpkd"
            fpath = out_dir / rel
            fpath.parent.mkdir(parents=True, exist_ok=True)
            write_features(fpath, s.teacher_features, precision="f32")
            entries.append({"id": s.sample_id, "tokens": list(s.tokens), "features": rel})
        manifest["splits"][split] = entries
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def load_corpus(data_dir) -> tuple[dict[str, list[PairedSample]], dict]:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    vmap = VisemeMap(table=tuple(manifest["viseme_table"]), n_classes=manifest["n_classes"])
    corpus: dict[str, list[PairedSample]] = {}
    for split, entries in manifest["splits"].items():
        samples = []
        for e in entries:
            tokens = tuple(int(t) for t in e["tokens"])
            feats = read_features(data_dir / e["features"])
            obs = one_hot(vmap.project(tokens) - 1, vmap.n_classes)
            samples.append(
                PairedSample(
                    sample_id=e["id"], tokens=tokens,
                    observations=obs, teacher_features=feats,
                )
            )
        corpus[split] = samples
    return corpus, manifest
