"""Flow-map cache keyed by content hash, plus in-memory dataset loading."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .._resample import resize2d
from ..flow import FlowError, FlowSolverConfig, assemble_flow_map, estimate_flow, locate_apex
from .io import DataError, read_flow_map, read_frame, read_pgm_raw, write_flow_map
from .manifest import Manifest, SampleRecord

INDEX_NAME = "index.json"
INDEX_VERSION = 1


def _sequence_frames(manifest: Manifest, rec: SampleRecord) -> list[Path]:
    d = manifest.resolve(rec.sequence_dir)
    frames = sorted(d.glob("*.pgm")) if d is not None and d.is_dir() else []
    if len(frames) < 2:
        raise DataError(f"{rec.sample_id}: sequence directory {d} holds fewer than two .pgm frames")
    return frames


def frame_pair(manifest: Manifest, rec: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    """Onset and apex frames; sequences fall back to the apex-location surrogate."""
    if rec.sequence_dir is None:
        return read_frame(manifest.resolve(rec.onset_path)), read_frame(manifest.resolve(rec.apex_path))
    paths = _sequence_frames(manifest, rec)
    frames = [read_frame(p) for p in paths]
    apex = rec.apex_index if rec.apex_index is not None else locate_apex(frames, 0)
    if not 0 < apex < len(frames):
        raise DataError(f"{rec.sample_id}: apex index {apex} out of range")
    return frames[0], frames[apex]


def _sample_hash(manifest: Manifest, rec: SampleRecord, cfg: FlowSolverConfig) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(cfg), sort_keys=True).encode())
    if rec.sequence_dir is None:
        sources = [manifest.resolve(rec.onset_path), manifest.resolve(rec.apex_path)]
    else:
        sources = _sequence_frames(manifest, rec)
        h.update(str(rec.apex_index).encode())
    for p in sources:
        try:
            h.update(Path(p).read_bytes())
        except OSError as exc:
            raise DataError(f"{rec.sample_id}: cannot read {p}: {exc}") from exc
    return h.hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class CacheStats:
    computed: int = 0
    written: int = 0
    reused: int = 0


class FlowCache:
    """Directory of RCNF files with a JSON index ``sample_id -> {resolution: file}``."""

    def __init__(self, root):
        self.root = Path(root)
        self.index: dict = {}
        path = self.root / INDEX_NAME
        if path.exists():
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"corrupt flow cache index {path}: {exc}") from exc
            if data.get("version") != INDEX_VERSION:
                raise DataError(f"{path}: unsupported index version {data.get('version')}")
            self.index = data["samples"]

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        body = {"version": INDEX_VERSION, "samples": self.index}
        (self.root / INDEX_NAME).write_text(json.dumps(body, sort_keys=True, indent=1), encoding="utf-8")

    def path_for(self, sample_id: str, resolution: int) -> Path:
        try:
            entry = self.index[sample_id]["maps"][str(resolution)]
        except KeyError:
            raise DataError(f"no cached flow for sample {sample_id!r} at R={resolution}") from None
        return self.root / entry["file"]

    def load(self, sample_id: str, resolution: int) -> np.ndarray:
        return read_flow_map(self.path_for(sample_id, resolution))


def precompute_flows(manifest: Manifest, cfg: FlowSolverConfig | None, resolutions, out_dir) -> tuple[FlowCache, CacheStats]:
    """Fill the cache with one RCNF per (sample, resolution); skip up-to-date entries."""
    cfg = cfg or FlowSolverConfig()
    cache = FlowCache(out_dir)
    cache.root.mkdir(parents=True, exist_ok=True)
    stats = CacheStats()
    for rec in manifest.records:
        key = _sample_hash(manifest, rec, cfg)
        entry = cache.index.get(rec.sample_id)
        if entry is None or entry.get("source_hash") != key:
            entry = {"source_hash": key, "maps": {}}
        todo = []
        for r in resolutions:
            m = entry["maps"].get(str(r))
            f = cache.root / m["file"] if m else None
            if m and f.exists() and _file_digest(f) == m["sha256"]:
                stats.reused += 1
            else:
                todo.append(int(r))
        if todo:
            try:
                onset, apex = frame_pair(manifest, rec)
                flow = estimate_flow(onset, apex, cfg)
            except FlowError as exc:
                raise DataError(f"{rec.sample_id}: flow extraction failed: {exc}") from exc
            stats.computed += 1
            for r in todo:
                name = f"{rec.sample_id}_R{r}.rcnf"
                write_flow_map(cache.root / name, assemble_flow_map(flow, r).data)
                entry["maps"][str(r)] = {"file": name, "sha256": _file_digest(cache.root / name)}
                stats.written += 1
        cache.index[rec.sample_id] = entry
    cache.save()
    return cache, stats


@dataclass
class FlowDataset:
    """Flow maps for one resolution, aligned with their metadata."""

    x: np.ndarray  # [N, 3, R, R] float32
    y: np.ndarray  # [N] int class indices
    subjects: np.ndarray
    domains: np.ndarray
    sample_ids: np.ndarray
    masks: np.ndarray | None = None  # [N, R, R] bool motion regions when known

    def __len__(self) -> int:
        return len(self.y)

    @property
    def resolution(self) -> int:
        return self.x.shape[-1]

    def take(self, idx) -> "FlowDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return FlowDataset(self.x[idx], self.y[idx], self.subjects[idx], self.domains[idx], self.sample_ids[idx],
                           None if self.masks is None else self.masks[idx])

    def where_subject(self, subjects, include: bool = True) -> "FlowDataset":
        sel = np.isin(self.subjects, list(subjects))
        return self.take(np.flatnonzero(sel if include else ~sel))


def load_mask(manifest: Manifest, rec: SampleRecord, resolution: int) -> np.ndarray | None:
    if rec.mask_path is None:
        return None
    raw, maxval = read_pgm_raw(manifest.resolve(rec.mask_path))
    m = raw.astype(np.float64) / maxval
    return resize2d(m, resolution, resolution) >= 0.5


def load_dataset(manifest: Manifest, cache: FlowCache, resolution: int, with_masks: bool = False) -> FlowDataset:
    recs = manifest.records
    x = np.stack([cache.load(r.sample_id, resolution) for r in recs]).astype(np.float32)
    if x.shape[-2:] != (resolution, resolution):
        raise DataError(f"cached maps have shape {x.shape[-2:]}, expected {resolution}x{resolution}")
    masks = None
    if with_masks:
        ms = [load_mask(manifest, r, resolution) for r in recs]
        masks = None if any(m is None for m in ms) else np.stack(ms)
    return FlowDataset(
        x,
        np.array([r.label_index for r in recs]),
        np.array([r.subject for r in recs]),
        np.array([r.domain for r in recs]),
        np.array([r.sample_id for r in recs]),
        masks,
    )
