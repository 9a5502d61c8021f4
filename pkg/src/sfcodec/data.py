"""Dataset ingestion, identity-disjoint splits and LFW-style verification pairs."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DataError
from .transforms import resize

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}
SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    root: str
    seed: int
    split_ratios: list[float]
    entries: list[tuple[str, str]] = field(default_factory=list)
    splits: dict[str, str] = field(default_factory=dict)
    file_hashes: dict[str, str] = field(default_factory=dict)
    content_hash: str = ""

    def identities(self, split=None):
        return sorted(i for i, s in self.splits.items() if split is None or s == split)

    def files(self, split):
        ids = set(self.identities(split))
        return [(p, i) for p, i in self.entries if i in ids]

    def compute_hash(self):
        h = hashlib.sha256()
        for path, ident in sorted(self.entries):
            h.update(f"{path}\0{ident}\0{self.splits[ident]}\0{self.file_hashes[path]}\n".encode())
        return h.hexdigest()

    def verify(self):
        """Re-hash the files on disk and compare against the recorded hash."""
        root = Path(self.root)
        for path, _ in self.entries:
            try:
                digest = _file_hash(root / path)
            except OSError as exc:
                raise DataError(f"manifest file missing: {path}") from exc
            if digest != self.file_hashes[path]:
                raise DataError(f"file changed since ingest: {path}")
        if self.compute_hash() != self.content_hash:
            raise DataError("manifest hash mismatch")

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        d["entries"] = [tuple(e) for e in d["entries"]]
        return cls(**d)


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_counts(n, ratios):
    """Largest-remainder allocation of ``n`` identities over the split ratios."""
    r = np.asarray(ratios, dtype=np.float64)
    if (r < 0).any() or r.sum() <= 0:
        raise DataError(f"invalid split ratios {ratios}")
    exact = r / r.sum() * n
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def ingest(root, split_ratios=(8, 1, 1), seed=0):
    """Scan ``root/<identity>/*.<img>`` and build a manifest with disjoint identity splits.

    Unreadable images are skipped with a warning; fewer than two usable
    identities is a :class:`DataError`.
    """
    root = Path(root).resolve()
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    entries, hashes = [], {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_EXTS:
                continue
            try:
                with Image.open(f) as im:
                    im.convert("RGB").load()
            except (OSError, UnidentifiedImageError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
                continue
            rel = f.relative_to(root).as_posix()
            entries.append((rel, d.name))
            hashes[rel] = _file_hash(f)
    identities = sorted({i for _, i in entries})
    if len(identities) < 2:
        raise DataError(f"need at least 2 identities, found {len(identities)}")
    rng = np.random.default_rng(seed)
    order = [identities[i] for i in rng.permutation(len(identities))]
    counts = split_counts(len(order), split_ratios)
    splits, pos = {}, 0
    for name, c in zip(SPLITS, counts):
        for ident in order[pos : pos + c]:
            splits[ident] = name
        pos += c
    m = DatasetManifest(str(root), seed, [float(r) for r in split_ratios], entries, splits, hashes)
    m.content_hash = m.compute_hash()
    return m


def load_image(path, size=None):
    """Read an image file as a ``(3, H, W)`` float32 tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    t = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if size is not None:
        t = resize(t, size).clamp(0.0, 1.0)
    return t


def save_image(t, path):
    arr = (t.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


@dataclass
class Split:
    images: torch.Tensor
    labels: torch.Tensor
    paths: list[str]
    identities: list[str]


def load_split(manifest, split, size):
    files = manifest.files(split)
    if not files:
        raise DataError(f"split {split!r} is empty")
    idents = manifest.identities(split)
    index = {name: i for i, name in enumerate(idents)}
    root = Path(manifest.root)
    images = torch.stack([load_image(root / p, size) for p, _ in files])
    labels = torch.tensor([index[i] for _, i in files], dtype=torch.long)
    return Split(images, labels, [p for p, _ in files], idents)


# ---------------------------------------------------------------------------
# verification pairs (LFW pairs.txt layout)


@dataclass(frozen=True)
class Pair:
    name_a: str
    index_a: int
    name_b: str
    index_b: int

    @property
    def same(self):
        return self.name_a == self.name_b


def _image_index(path):
    stem = Path(path).stem
    try:
        return int(stem.rsplit("_", 1)[1])
    except (IndexError, ValueError):
        raise DataError(f"image name {path} lacks a _NNNN index") from None


def make_pairs(manifest, split="test", pairs_per_fold=60, folds=10, seed=0):
    """Balanced same/different pairs grouped into folds; returns a list of folds."""
    rng = np.random.default_rng(seed)
    by_id = {}
    for p, ident in manifest.files(split):
        by_id.setdefault(ident, []).append(_image_index(p))
    ids = sorted(by_id)
    multi = [i for i in ids if len(by_id[i]) >= 2]
    if len(ids) < 2 or not multi:
        raise DataError(f"split {split!r} cannot form both positive and negative pairs")
    half = pairs_per_fold // 2
    # once every distinct positive pair is used, repeats are allowed
    unique_pos = sum(len(by_id[i]) * (len(by_id[i]) - 1) // 2 for i in multi)
    seen = set()
    out = []
    for _ in range(folds):
        pos, neg = [], []
        while len(pos) < half:
            ident = multi[rng.integers(len(multi))]
            a, b = sorted(rng.choice(by_id[ident], 2, replace=False))
            key = (ident, a, ident, b)
            if key not in seen or len(seen) >= unique_pos:
                seen.add(key)
                pos.append(Pair(*key))
        while len(neg) < half:
            i, j = sorted(rng.choice(len(ids), 2, replace=False))
            a = int(rng.choice(by_id[ids[i]]))
            b = int(rng.choice(by_id[ids[j]]))
            neg.append(Pair(ids[i], a, ids[j], b))
        out.append(pos + neg)
    return out


def write_pairs(path, folds):
    half = len(folds[0]) // 2
    lines = [f"{len(folds)}\t{half}"]
    for fold in folds:
        for p in fold:
            if p.same:
                lines.append(f"{p.name_a}\t{p.index_a}\t{p.index_b}")
            else:
                lines.append(f"{p.name_a}\t{p.index_a}\t{p.name_b}\t{p.index_b}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pairs(path):
    try:
        lines = [l.split() for l in Path(path).read_text().splitlines() if l.strip()]
    except OSError as exc:
        raise DataError(f"cannot read pairs file {path}: {exc}") from None
    try:
        nfolds, half = int(lines[0][0]), int(lines[0][1])
        pairs = []
        for parts in lines[1:]:
            if len(parts) == 3:
                pairs.append(Pair(parts[0], int(parts[1]), parts[0], int(parts[2])))
            elif len(parts) == 4:
                pairs.append(Pair(parts[0], int(parts[1]), parts[2], int(parts[3])))
            else:
                raise ValueError(parts)
    except (IndexError, ValueError) as exc:
        raise DataError(f"malformed pairs file {path}: {exc}") from None
    if len(pairs) != nfolds * 2 * half:
        raise DataError(f"pairs file declares {nfolds}x{2 * half} pairs, found {len(pairs)}")
    return [pairs[i * 2 * half : (i + 1) * 2 * half] for i in range(nfolds)]


def pair_lookup(manifest, split=None):
    """Map ``(identity, index)`` to the manifest-relative image path."""
    files = manifest.entries if split is None else manifest.files(split)
    return {(ident, _image_index(p)): p for p, ident in files}
