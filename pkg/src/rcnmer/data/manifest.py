"""Sample records and the JSON-lines manifest."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .io import DataError

LABELS = ("negative", "positive", "surprise")
MANIFEST_FORMAT = "rcnmer-manifest"
MANIFEST_VERSION = 1


@dataclass
class SampleRecord:
    sample_id: str
    subject: str
    domain: str
    label: str
    onset_path: str | None = None
    apex_path: str | None = None
    sequence_dir: str | None = None
    apex_index: int | None = None
    mask_path: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"{self.sample_id}: label {self.label!r} is not one of {LABELS}")
        if self.onset_path is None and self.sequence_dir is None:
            raise DataError(f"{self.sample_id}: needs onset/apex paths or a sequence directory")
        if self.sequence_dir is None and self.apex_path is None:
            raise DataError(f"{self.sample_id}: apex_path missing")

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass
class Manifest:
    records: list[SampleRecord]
    metadata: dict = field(default_factory=dict)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids: {dup[:5]}")
        domain_of: dict[str, str] = {}
        for r in self.records:
            prev = domain_of.setdefault(r.subject, r.domain)
            if prev != r.domain:
                raise DataError(f"subject {r.subject!r} appears in domains {prev!r} and {r.domain!r}")

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self.records})

    @property
    def domains(self) -> list[str]:
        return sorted({r.domain for r in self.records})

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def by_id(self, sample_id: str) -> SampleRecord:
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(sample_id)

    def subset(self, subjects) -> "Manifest":
        keep = set(subjects)
        return Manifest([r for r in self.records if r.subject in keep], dict(self.metadata), self.root)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "metadata": manifest.metadata}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({k: v for k, v in asdict(r).items() if v is not None}, sort_keys=True)
              for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> Manifest:
    """Read a manifest; relative paths in records resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    metadata: dict = {}
    records = []
    known = set(SampleRecord.__dataclass_fields__)
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        if "format" in obj:
            if obj["format"] != MANIFEST_FORMAT or obj.get("version") != MANIFEST_VERSION:
                raise DataError(f"{path}: unsupported manifest format {obj.get('format')!r} v{obj.get('version')}")
            metadata = obj.get("metadata", {})
            continue
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
        try:
            records.append(SampleRecord(**obj))
        except TypeError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise DataError(f"{path}: manifest has no records")
    return Manifest(records, metadata, path.parent)
