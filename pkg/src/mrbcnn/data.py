"""Manifests, image I/O, resizing, epoch batching and a synthetic identity set."""

from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, DecodeError, DimensionError, ManifestError
from .rng import Stream

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("path", "person_id", "camera_id")
RAW_MAGIC = b"MRTD"


@dataclass(frozen=True)
class Record:
    path: str
    person_id: int
    camera_id: int
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    @property
    def person_ids(self) -> np.ndarray:
        return np.array([r.person_id for r in self.records], dtype=np.int64)

    @property
    def camera_ids(self) -> np.ndarray:
        return np.array([r.camera_id for r in self.records], dtype=np.int64)

    @property
    def identities(self) -> list[int]:
        return sorted({r.person_id for r in self.records})

    def resolve(self, rec: Record) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, keep: Sequence[int]) -> DatasetManifest:
        return DatasetManifest([self.records[i] for i in keep], self.root)

    def with_ids(self, ids) -> DatasetManifest:
        wanted = set(int(i) for i in ids)
        return DatasetManifest([r for r in self.records if r.person_id in wanted], self.root)

    def validate(self) -> None:
        seen: set[str] = set()
        for i, r in enumerate(self.records):
            if r.path in seen:
                raise ManifestError(f"duplicate path {r.path!r} (record {i})")
            seen.add(r.path)
            if r.camera_id < 0:
                raise ManifestError(f"negative camera id for {r.path!r}")


def load_manifest(path) -> DatasetManifest:
    """Parse a ``path,person_id,camera_id[,split]`` CSV; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    records: list[Record] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header[:3]) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: line 1: expected header {','.join(MANIFEST_HEADER)}[,split]")
        has_split = len(header) > 3 and header[3].strip() == "split"
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (3, 4):
                raise ManifestError(f"{path}: line {lineno}: expected 3 or 4 fields, got {len(row)}")
            try:
                pid, cam = int(row[1]), int(row[2])
            except ValueError:
                raise ManifestError(f"{path}: line {lineno}: person_id and camera_id must be integers") from None
            split = row[3].strip() if has_split and len(row) == 4 and row[3].strip() else None
            records.append(Record(row[0].strip(), pid, cam, split))
    manifest = DatasetManifest(records, path.parent)
    manifest.validate()
    if not records:
        log.warning("manifest %s has no records", path)
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    has_split = any(r.split for r in manifest.records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER + (("split",) if has_split else ()))
        for r in manifest.records:
            p = manifest.resolve(r).resolve()
            try:
                shown = Path(os.path.relpath(p, path.parent.resolve())).as_posix()
            except ValueError:  # different drive
                shown = str(p)
            row = [shown, r.person_id, r.camera_id]
            if has_split:
                row.append(r.split or "")
            w.writerow(row)


# --- image files --------------------------------------------------------------


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    toks: list[bytes] = []
    i = 2
    n = len(buf)
    while len(toks) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise DecodeError("truncated PPM header")
        toks.append(buf[i:j])
        i = j
    return toks, i + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise DecodeError("not a binary PPM (missing P6 magic)")
    toks, start = _ppm_tokens(buf, 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise DecodeError("malformed PPM header") from None
    if w < 1 or h < 1 or maxval != 255:
        raise DecodeError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    need = w * h * 3
    body = buf[start : start + need]
    if len(body) != need:
        raise DecodeError(f"truncated PPM payload: {len(body)} of {need} bytes")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    """``3 x H x W`` array in [0, 1] to P6 bytes (values rounded to 8 bits)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected 3 x H x W, got {img.shape}")
    pix = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pix.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def encode_raw(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    head = RAW_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_raw(buf: bytes) -> np.ndarray:
    if buf[:4] != RAW_MAGIC:
        raise DecodeError("bad raw-tensor magic")
    if len(buf) < 8:
        raise DecodeError("truncated raw-tensor header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + 4 * rank:
        raise DecodeError("truncated raw-tensor shape table")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 8 * n:
        raise DecodeError(f"raw-tensor payload has {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)


def decode_image(path) -> np.ndarray:
    """Read a P6 PPM or raw-tensor file as a channels-first float array."""
    buf = Path(path).read_bytes()
    if buf[:4] == RAW_MAGIC:
        arr = decode_raw(buf)
        if arr.ndim != 3:
            raise DecodeError(f"raw image tensor must be 3-d, got shape {arr.shape}")
        return arr
    if buf[:2] == b"P6":
        return decode_ppm(buf)
    raise DecodeError(f"{path}: unrecognised image magic {buf[:4]!r}")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(img: np.ndarray, out_h: int = 160, out_w: int = 60) -> np.ndarray:
    """Bilinear resampling with half-pixel centres; a no-op at the target size."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or min(img.shape) < 1:
        raise DimensionError(f"expected C x H x W image, got {img.shape}")
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    rh, rw = _interp_matrix(h, out_h), _interp_matrix(w, out_w)
    return np.matmul(np.matmul(rh, img), rw.T)


# --- in-memory image sets and batching --------------------------------------------


@dataclass
class Batch:
    images: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class ImageSet:
    """All images of a manifest decoded, resized and normalised in memory."""

    manifest: DatasetManifest
    images: np.ndarray
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    @classmethod
    def load(cls, manifest: DatasetManifest, height: int = 160, width: int = 60, mean=None, std=None) -> ImageSet:
        out = np.empty((len(manifest), 3, height, width))
        for i, rec in enumerate(manifest.records):
            img = resize_bilinear(decode_image(manifest.resolve(rec)), height, width)
            if img.min() < 0.0 or img.max() > 1.0:
                raise DecodeError(f"{rec.path}: pixel values outside [0, 1]")
            out[i] = img
        if mean is not None:
            out -= np.asarray(mean, dtype=np.float64)[:, None, None]
        if std is not None:
            out /= np.asarray(std, dtype=np.float64)[:, None, None]
        return cls(manifest, out, mean, std)

    def __len__(self) -> int:
        return len(self.manifest)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(
            self.images[idx], self.manifest.person_ids[idx], self.manifest.camera_ids[idx], idx
        )


def _degenerate(ids: np.ndarray) -> bool:
    uniq = np.unique(ids).size
    return uniq == ids.size or uniq == 1


def epoch_plan(person_ids, batch_size: int, stream: Stream, epoch: int, max_tries: int = 100) -> list[np.ndarray]:
    """Index batches for one epoch: a seeded shuffle cut into consecutive chunks.

    A chunk whose ids are all distinct or all equal is reshuffled together
    with a neighbouring chunk until both are usable.  A trailing chunk with a
    single item is merged into its predecessor.
    """
    ids = np.asarray(person_ids)
    n = ids.size
    if n < 2:
        raise ContractError(f"need at least 2 records to form batches, got {n}")
    if batch_size < 2:
        raise ContractError(f"batch size must be at least 2, got {batch_size}")
    es = stream.split("epoch", epoch)
    perm = es.gen.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    fix = es.split("guard")
    for k in range(len(chunks)):
        tries = 0
        while _degenerate(ids[chunks[k]]):
            if len(chunks) == 1 or tries >= max_tries:
                raise ContractError(
                    f"cannot form a batch with both matching and non-matching pairs (batch {k} of epoch {epoch})"
                )
            j = k + 1 if k + 1 < len(chunks) else k - 1
            pool = fix.gen.permutation(np.concatenate([chunks[k], chunks[j]]))
            chunks[k], chunks[j] = pool[: len(chunks[k])], pool[len(chunks[k]) :]
            tries += 1
    return chunks


def make_epoch_batches(images: ImageSet, batch_size: int, stream: Stream, epoch: int) -> list[Batch]:
    return [images.batch(idx) for idx in epoch_plan(images.manifest.person_ids, batch_size, stream, epoch)]


# --- synthetic identities ---------------------------------------------------------

_PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.55, 0.85],
        [0.20, 0.70, 0.25],
        [0.90, 0.80, 0.20],
        [0.55, 0.25, 0.70],
        [0.15, 0.15, 0.20],
        [0.90, 0.90, 0.90],
        [0.95, 0.55, 0.15],
    ]
)

SYNTH_H, SYNTH_W = 160, 60


@dataclass(frozen=True)
class _Identity:
    head: np.ndarray
    torso: np.ndarray
    legs: np.ndarray
    accent: np.ndarray
    stripe_period: int
    accent_row: int
    accent_side: int
    belt_row: int


def _draw_identity(gen: np.random.Generator) -> _Identity:
    pick = lambda: _PALETTE[gen.integers(len(_PALETTE))] * gen.uniform(0.85, 1.0)  # noqa: E731
    return _Identity(
        head=pick(),
        torso=pick(),
        legs=pick(),
        accent=pick(),
        stripe_period=int(gen.choice([0, 6, 10, 14])),
        accent_row=int(gen.integers(34, 120)),
        accent_side=int(gen.integers(2)),
        belt_row=int(gen.integers(78, 92)),
    )


def _render(ident: _Identity, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Figure on a flat grey background, plus the figure's pixel mask."""
    img = np.full((3, SYNTH_H, SYNTH_W), np.nan)
    rows = np.arange(SYNTH_H)
    x0, x1 = 16 + shift, 44 + shift
    body = slice(max(x0, 0), min(x1, SYNTH_W))
    img[:, 4:30, max(22 + shift, 0) : min(38 + shift, SYNTH_W)] = ident.head[:, None, None]
    img[:, 30:88, body] = ident.torso[:, None, None]
    if ident.stripe_period:
        on = ((rows[30:88] - 30) // (ident.stripe_period // 2)) % 2 == 1
        img[:, 30:88, body] = np.where(on[None, :, None], ident.accent[:, None, None], img[:, 30:88, body])
    img[:, ident.belt_row : ident.belt_row + 4, body] = ident.accent[:, None, None] * 0.5
    img[:, 88:156, body] = ident.legs[:, None, None]
    a0 = x0 + (2 if ident.accent_side == 0 else 16)
    img[:, ident.accent_row : ident.accent_row + 12, max(a0, 0) : min(a0 + 10, SYNTH_W)] = ident.accent[:, None, None]
    mask = ~np.isnan(img[0])
    return np.where(mask, img, 0.45), mask


def _clutter(gen: np.random.Generator, img: np.ndarray, n: int) -> np.ndarray:
    for _ in range(n):
        h, w = int(gen.integers(8, 40)), int(gen.integers(6, 20))
        r, c = int(gen.integers(0, SYNTH_H - h)), int(gen.integers(0, SYNTH_W - w))
        img[:, r : r + h, c : c + w] = _PALETTE[gen.integers(len(_PALETTE))][:, None, None]
    return img


def synth_dataset(
    stream: Stream,
    n_ids: int,
    per_id: int,
    noise: float,
    out_dir,
    jitter: int = 4,
    n_cameras: int = 2,
    first_id: int = 0,
) -> DatasetManifest:
    """Write ``n_ids * per_id`` PPM images plus ``manifest.csv`` under ``out_dir``.

    Each identity has a fixed appearance (head/torso/leg colours, stripe
    period, accent patch and belt at identity-specific heights).  Images are
    assigned to cameras round-robin.  With ``noise > 0`` every image also
    gets background clutter, a per-camera colour cast, a per-image colour
    gain and Gaussian pixel noise of std ``noise``; ``jitter`` bounds the
    horizontal offset of the figure.  ``noise=0, jitter=0`` renders every
    image of an identity identically.
    """
    if n_ids < 2 or per_id < 2:
        raise ContractError("need at least 2 identities and 2 images per identity")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cast = stream.split("cameras").gen.uniform(-0.12, 0.12, size=(n_cameras, 3))
    records = []
    for k in range(n_ids):
        pid = first_id + k
        ident = _draw_identity(stream.split("identity", pid).gen)
        gen = stream.split("views", pid).gen
        for j in range(per_id):
            cam = j % n_cameras
            shift = int(gen.integers(-jitter, jitter + 1)) if jitter > 0 else 0
            img, figure = _render(ident, shift)
            if noise > 0:
                background = _clutter(gen, np.full_like(img, gen.uniform(0.2, 0.7)), int(gen.integers(2, 6)))
                img = np.where(figure, img, background)
                gain = gen.uniform(0.75, 1.25, size=3)
                img = img * gain[:, None, None] + cast[cam][:, None, None]
                img = img + gen.normal(0.0, noise, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            rel = f"images/{pid:05d}_c{cam}_{j:03d}.ppm"
            (out / rel).write_bytes(encode_ppm(img))
            records.append(Record(rel, pid, cam))
    manifest = DatasetManifest(records, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
