"""Affordance memory: trajectory reduction, construction, persistence.

The store format is line-delimited JSON: one header line, then one entry
per line. Image payloads are base64-encoded little-endian float64 so that
round trips are bitwise lossless; all other floats rely on JSON's repr
round-tripping.
"""

import base64
import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, EmptyMemoryError, ParseError, SchemaError

FORMAT_NAME = "affkit-memory"
FORMAT_VERSION = 1
DEGENERATE_EPS = 1e-6

_WS = re.compile(r"\s+")


def normalize_task(label):
    """Lowercase, single-spaced task label."""
    return _WS.sub(" ", label.strip().lower())


@dataclass(frozen=True)
class Affordance2D:
    """Contact point (pixels, x right / y down) and unit action direction."""

    contact: tuple  # (x, y)
    direction: tuple  # (x, y), unit norm

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ContractError(f"direction {self.direction} is not unit norm")


@dataclass
class MemoryEntry:
    image: np.ndarray  # H x W x C float64
    embedding: np.ndarray  # (d_emb,)
    task: str
    affordance: Affordance2D
    source_id: Optional[str] = None


@dataclass
class Memory:
    entries: list = field(default_factory=list)
    d_emb: int = 0

    def __len__(self):
        return len(self.entries)

    def task_index(self):
        idx = {}
        for i, e in enumerate(self.entries):
            idx.setdefault(e.task, []).append(i)
        return idx


class InvalidTrajectory:
    """Sentinel for trajectories with no usable dominant orientation."""

    def __repr__(self):
        return "InvalidTrajectory"


INVALID = InvalidTrajectory()


def reduce_trajectory(points, mode="pca"):
    """Dominant motion direction of a 2D trajectory, or INVALID.

    `mode` is "pca" (signed first principal component, sign fixed by net
    displacement) or "endpoint" (net displacement only).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ContractError(f"trajectory needs >= 2 2D points, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ContractError("trajectory contains non-finite points")

    disp = pts[-1] - pts[0]
    if np.linalg.norm(disp) < DEGENERATE_EPS:
        return INVALID

    if mode == "endpoint":
        return tuple(disp / np.linalg.norm(disp))
    if mode != "pca":
        raise ContractError(f"unknown reduction mode {mode!r}")

    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    if np.linalg.norm(cov) < DEGENERATE_EPS ** 2:
        return INVALID
    evals, evecs = np.linalg.eigh(cov)
    axis = evecs[:, np.argmax(evals)]
    if axis @ disp < 0:
        axis = -axis
    return tuple(axis / np.linalg.norm(axis))


def build_memory(samples, reduction_mode="pca"):
    """Build a Memory from (image, embedding, task, annotation[, source_id]).

    The annotation is either an Affordance2D (passed through) or a
    trajectory point list (reduced; degenerate samples are dropped, with
    the contact taken as the first trajectory point).
    """
    if not samples:
        raise EmptyMemoryError("no samples given")
    entries = []
    d_emb = None
    for sample in samples:
        image, embedding, task, annotation = sample[:4]
        source_id = sample[4] if len(sample) > 4 else None
        embedding = np.asarray(embedding, dtype=np.float64)
        if d_emb is None:
            d_emb = embedding.shape[0]
        elif embedding.shape[0] != d_emb:
            raise SchemaError(
                f"embedding dim {embedding.shape[0]} != memory-wide {d_emb}")
        if isinstance(annotation, Affordance2D):
            aff = annotation
        else:
            direction = reduce_trajectory(annotation, mode=reduction_mode)
            if direction is INVALID:
                continue
            contact = tuple(np.asarray(annotation, dtype=np.float64)[0])
            aff = Affordance2D(contact=contact, direction=direction)
        entries.append(MemoryEntry(
            image=np.asarray(image, dtype=np.float64),
            embedding=embedding,
            task=normalize_task(task),
            affordance=aff,
            source_id=source_id))
    if not entries:
        raise EmptyMemoryError("all samples had degenerate trajectories")
    return Memory(entries=entries, d_emb=d_emb)


def _encode_image(img):
    img = np.ascontiguousarray(img, dtype="<f8")
    return base64.b64encode(img.tobytes()).decode("ascii")


def _decode_image(payload, h, w, c, line):
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except Exception as exc:
        raise ParseError(f"bad image payload: {exc}", line=line)
    if len(raw) != h * w * c * 8:
        raise ParseError(f"image payload has {len(raw)} bytes, "
                         f"expected {h * w * c * 8}", line=line)
    return np.frombuffer(raw, dtype="<f8").reshape(h, w, c).copy()


def save_memory(memory, path):
    """Write the memory store; an empty memory is just the header."""
    with open(path, "w") as fh:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
                  "d_emb": memory.d_emb, "count": len(memory),
                  "image_encoding": "base64/float64-le"}
        fh.write(json.dumps(header) + "\n")
        for e in memory.entries:
            h, w, c = e.image.shape
            rec = {"task": e.task, "h": h, "w": w, "c": c,
                   "image": _encode_image(e.image),
                   "embedding": e.embedding.tolist(),
                   "contact": list(map(float, e.affordance.contact)),
                   "direction": list(map(float, e.affordance.direction)),
                   "source_id": e.source_id}
            fh.write(json.dumps(rec) + "\n")


def load_memory(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc}", line=1)
    if header.get("format") != FORMAT_NAME:
        raise ParseError(f"not a {FORMAT_NAME} store", line=1)
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"unsupported version {header.get('version')}", line=1)
    count = header.get("count")
    d_emb = header.get("d_emb", 0)
    body = lines[1:]
    if count is None or len(body) != count:
        raise ParseError(f"expected {count} entries, found {len(body)}", line=1)

    entries = []
    for n, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=n)
        try:
            image = _decode_image(rec["image"], rec["h"], rec["w"], rec["c"], n)
            embedding = np.asarray(rec["embedding"], dtype=np.float64)
            aff = Affordance2D(contact=tuple(rec["contact"]),
                               direction=tuple(rec["direction"]))
            entry = MemoryEntry(image=image, embedding=embedding,
                                task=rec["task"], affordance=aff,
                                source_id=rec.get("source_id"))
        except KeyError as exc:
            raise ParseError(f"missing field {exc}", line=n)
        if embedding.shape[0] != d_emb:
            raise SchemaError(
                f"line {n}: embedding dim {embedding.shape[0]} != header {d_emb}")
        entries.append(entry)
    return Memory(entries=entries, d_emb=d_emb)
