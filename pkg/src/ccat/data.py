"""Manifests, summary audio embeddings and Kennard-Stone train/dev splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import LabelError, ParseError, TooFewPoints
from .frontend import FeatureConfig, Waveform, load_wav, mel_log_magnitude

SPLIT_HEADER = "# ccat-split v1 fraction={fraction} embedder={embedder}"
TAG_SEP = ";"


@dataclass
class UtteranceRecord:
    id: str
    path: str
    mos: float
    ci95: float | None = None
    tags: list[str] = field(default_factory=list)

    @property
    def corpus(self) -> str:
        """The first tag names the corpus; untagged records share the '' corpus."""
        return self.tags[0] if self.tags else ""


def _check_mos(mos: float, where: str) -> None:
    if not (1.0 <= mos <= 5.0):
        raise LabelError(f"{where}: MOS {mos} outside [1, 5]")


def parse_manifest(text: str, source: str = "<manifest>") -> list[UtteranceRecord]:
    """Parse CSV with header ``id,path,mos[,ci95][,tags]``; '#' lines are comments."""
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines())
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ParseError(f"{source}: empty manifest")
    rows = list(csv.reader([ln for _, ln in lines]))
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["id", "path", "mos"] or any(h not in ("ci95", "tags") for h in header[3:]):
        raise ParseError(f"{source}:{lines[0][0]}: header must be id,path,mos[,ci95][,tags]")
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    for (lineno, _), row in zip(lines[1:], rows[1:]):
        where = f"{source}:{lineno}"
        if len(row) < 3 or len(row) > len(header):
            raise ParseError(f"{where}: expected {len(header)} columns, got {len(row)}")
        values = dict(zip(header, (c.strip() for c in row)))
        uid = values["id"]
        if not uid:
            raise ParseError(f"{where}: empty id")
        if uid in seen:
            raise ParseError(f"{where}: duplicate id {uid!r}")
        seen.add(uid)
        try:
            mos = float(values["mos"])
            ci = values.get("ci95") or None
            ci95 = float(ci) if ci is not None else None
        except ValueError as exc:
            raise ParseError(f"{where}: {exc}") from exc
        if not math.isfinite(mos):
            raise ParseError(f"{where}: non-finite MOS")
        _check_mos(mos, where)
        if ci95 is not None and not (ci95 >= 0):
            raise ParseError(f"{where}: ci95 must be >= 0")
        tags = [t for t in (values.get("tags") or "").split(TAG_SEP) if t]
        records.append(UtteranceRecord(uid, values["path"], mos, ci95, tags))
    return records


def load_manifest(path: str | Path) -> list[UtteranceRecord]:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), str(path))


def format_manifest(records: Sequence[UtteranceRecord], header_comment: str | None = None) -> str:
    out = []
    if header_comment:
        out.append(header_comment)
    out.append("id,path,mos,ci95,tags")
    for r in records:
        ci = "" if r.ci95 is None else repr(r.ci95)
        row = [r.id, r.path, repr(r.mos), ci, TAG_SEP.join(r.tags)]
        buf = []
        for cell in row:
            buf.append(f'"{cell}"' if ("," in cell or '"' in cell) else cell)
        out.append(",".join(buf))
    return "\n".join(out) + "\n"


def resolve(record: UtteranceRecord, base: str | Path) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() else Path(base) / p


# ------------------------------------------------------------------ embedding

EMBEDDER_NAME = "logmel96"


def embedding_from_frames(frames: np.ndarray) -> np.ndarray:
    """[mean over time | std over time] per band; independent of frame order."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.concatenate([frames.mean(axis=0), frames.std(axis=0)])


def summary_embedding(w: Waveform) -> np.ndarray:
    """96-dim summary of the default 48-band log-mel spectrogram."""
    return embedding_from_frames(mel_log_magnitude(w, FeatureConfig(kind="MEL")).frames)


# -------------------------------------------------------------- Kennard-Stone

def kennard_stone(embeddings, n_select: int) -> list[int]:
    """Kennard-Stone selection order for the first ``n_select`` points.

    Starts from the farthest pair, then repeatedly takes the point whose
    nearest selected neighbour is farthest away.  Ties go to the lowest index.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    N = X.shape[0]
    if N < 2:
        raise TooFewPoints("Kennard-Stone needs at least two points")
    n_select = min(max(n_select, 0), N)
    if n_select == 0:
        return []
    best, pair = -1.0, (0, 1)
    for i in range(N - 1):
        d = np.linalg.norm(X[i + 1:] - X[i], axis=1)
        j = int(np.argmax(d))
        if d[j] > best:
            best, pair = float(d[j]), (i, i + 1 + j)
    order = list(pair[:n_select])
    if n_select <= 2:
        return order
    mind = np.minimum(np.linalg.norm(X - X[pair[0]], axis=1), np.linalg.norm(X - X[pair[1]], axis=1))
    chosen = np.zeros(N, dtype=bool)
    chosen[list(pair)] = True
    while len(order) < n_select:
        cand = np.where(chosen, -np.inf, mind)
        k = int(np.argmax(cand))
        order.append(k)
        chosen[k] = True
        mind = np.minimum(mind, np.linalg.norm(X - X[k], axis=1))
    return order


def kennard_stone_split(embeddings, train_fraction: float) -> tuple[list[int], list[int]]:
    """Training indices (selection order) and remaining dev indices (ascending)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    X = np.asarray(embeddings, dtype=np.float64)
    N = X.shape[0]
    if N < 2:
        raise TooFewPoints("Kennard-Stone needs at least two points")
    n_train = math.ceil(train_fraction * N - 1e-9)
    train = kennard_stone(X, n_train)
    taken = set(train)
    return train, [i for i in range(N) if i not in taken]


def split_corpus(records: Sequence[UtteranceRecord], train_fraction: float = 0.9,
                 embed: Callable[[UtteranceRecord], np.ndarray] | None = None,
                 base: str | Path = ".") -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Kennard-Stone split applied separately inside every corpus.

    Output keeps the manifest order within each side.  A corpus with a single
    record goes entirely to training.
    """
    if embed is None:
        def embed(r):
            return summary_embedding(load_wav(resolve(r, base)))
    corpora: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        corpora.setdefault(r.corpus, []).append(i)
    train_idx: set[int] = set()
    for name in sorted(corpora):
        members = corpora[name]
        if len(members) < 2:
            train_idx.update(members)
            continue
        emb = np.stack([np.asarray(embed(records[i]), dtype=np.float64) for i in members])
        tr, _ = kennard_stone_split(emb, train_fraction)
        train_idx.update(members[j] for j in tr)
    train = [r for i, r in enumerate(records) if i in train_idx]
    dev = [r for i, r in enumerate(records) if i not in train_idx]
    return train, dev


def split_header(train_fraction: float, embedder: str = EMBEDDER_NAME) -> str:
    return SPLIT_HEADER.format(fraction=f"{train_fraction:g}", embedder=embedder)
