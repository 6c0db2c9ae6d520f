"""Deterministic synthetic micro-expression data with pseudo-domain shift.

Each subject gets a smooth face-like base pattern.  A sample's apex frame is
the onset frame displaced by a class-specific local motion field:

* positive: upward motion of a bump at the lower centre (mouth region)
* surprise: upward motion of a wide band across the brows
* negative: the two brow regions move toward the midline (contraction)

Bumps have compact support, so the stored motion mask is exact.  Domain
profiles then alter brightness, contrast, blur, sensor noise, frame size and
add a small global jitter between onset and apex.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..flow.solver import warp
from .io import DataError, write_pgm
from .manifest import LABELS, Manifest, SampleRecord, save_manifest

NATIVE_RESOLUTION = 160


@dataclass(frozen=True)
class DomainProfile:
    """Capture conditions of one pseudo-dataset.

    Safe ranges: brightness [-0.3, 0.3], contrast [0.5, 1.5], noise_sigma
    [0, 0.1], blur_radius [0, 3] px, jitter [0, 2] px, resolution [32, 512].
    """

    name: str
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    jitter: float = 0.0
    resolution: int = NATIVE_RESOLUTION

    def __post_init__(self):
        checks = [
            (-0.3 <= self.brightness <= 0.3, "brightness"),
            (0.5 <= self.contrast <= 1.5, "contrast"),
            (0.0 <= self.noise_sigma <= 0.1, "noise_sigma"),
            (0.0 <= self.blur_radius <= 3.0, "blur_radius"),
            (0.0 <= self.jitter <= 2.0, "jitter"),
            (32 <= self.resolution <= 512, "resolution"),
        ]
        bad = [name for ok, name in checks if not ok]
        if bad:
            raise DataError(f"domain {self.name!r}: {', '.join(bad)} outside the safe range")

    def scaled(self, s: float) -> "DomainProfile":
        """Move every shift parameter ``s`` times as far from the neutral profile."""
        return replace(
            self,
            brightness=self.brightness * s,
            contrast=1.0 + (self.contrast - 1.0) * s,
            noise_sigma=self.noise_sigma * s,
            blur_radius=self.blur_radius * s,
            jitter=self.jitter * s,
        )

    def clean(self) -> "DomainProfile":
        return replace(self, noise_sigma=0.0, jitter=0.0)


DEFAULT_DOMAINS = (
    DomainProfile("dom-a", brightness=0.0, contrast=1.0, noise_sigma=0.008, blur_radius=0.0, jitter=0.0,
                  resolution=160),
    DomainProfile("dom-b", brightness=0.24, contrast=0.5, noise_sigma=0.02, blur_radius=2.0, jitter=0.5,
                  resolution=128),
    DomainProfile("dom-c", brightness=-0.2, contrast=1.5, noise_sigma=0.03, blur_radius=1.0, jitter=0.8,
                  resolution=192),
)


def stream_rng(seed: int, key: str) -> np.random.Generator:
    """Independent deterministic stream per (seed, key)."""
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c)  # (u, v) = (x, y) in [0, 1]


def _blob(u, v, cx, cy, sx, sy):
    return np.exp(-0.5 * (((u - cx) / sx) ** 2 + ((v - cy) / sy) ** 2))


def base_face(n: int, rng: np.random.Generator) -> np.ndarray:
    u, v = _grid(n)
    j = lambda: rng.uniform(-0.015, 0.015)
    amp = lambda: rng.uniform(0.8, 1.2)
    img = 0.45 + 0.15 * _blob(u, v, 0.5 + j(), 0.5 + j(), 0.30, 0.38)
    brow_y = 0.32 + j()
    for cx in (0.35, 0.65):
        img -= 0.22 * amp() * _blob(u, v, cx + j(), brow_y, 0.08, 0.018)
        img -= 0.25 * amp() * _blob(u, v, cx + j(), 0.43 + j(), 0.035, 0.02)
    img -= 0.08 * amp() * _blob(u, v, 0.5, 0.56 + j(), 0.02, 0.07)
    img -= 0.22 * amp() * _blob(u, v, 0.5 + j(), 0.72 + j(), 0.10, 0.02)
    # skin texture keeps every region trackable
    tex = ndimage.gaussian_filter(rng.standard_normal((n, n)), n / 60.0, mode="wrap")
    img += 0.10 * tex / (np.abs(tex).max() + 1e-12)
    return np.clip(img, 0.05, 0.95)


def _bump(u, v, cx, cy, rx, ry) -> np.ndarray:
    """Raised-cosine bump with compact elliptical support."""
    r = np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2)
    return np.where(r < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, 1.0))), 0.0)


def motion_field(label: str, n: int, magnitude: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Displacement (dx, dy) in pixels; content at x moves to x + d."""
    u, v = _grid(n)
    j = lambda: rng.uniform(-0.02, 0.02)
    if label == "positive":
        b = _bump(u, v, 0.5 + j(), 0.72 + j(), 0.26, 0.15)
        return np.zeros_like(b), -magnitude * b
    if label == "surprise":
        b = _bump(u, v, 0.5 + j(), 0.32 + j(), 0.36, 0.13)
        return np.zeros_like(b), -magnitude * b
    if label == "negative":
        cy = 0.32 + j()
        left = _bump(u, v, 0.34 + j(), cy, 0.16, 0.13)
        right = _bump(u, v, 0.66 + j(), cy, 0.16, 0.13)
        return magnitude * (left - right), 0.3 * magnitude * (left + right)
    raise DataError(f"unknown label {label!r}")


def apply_profile(img: np.ndarray, profile: DomainProfile, rng: np.random.Generator) -> np.ndarray:
    out = img
    if profile.blur_radius > 0:
        out = ndimage.gaussian_filter(out, profile.blur_radius, mode="nearest")
    out = profile.contrast * (out - 0.5) + 0.5 + profile.brightness
    if profile.noise_sigma > 0:
        out = out + rng.normal(0.0, profile.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def render_sample(face: np.ndarray, label: str, profile: DomainProfile, rng: np.random.Generator):
    """(onset, apex, motion mask) for one sample."""
    n = face.shape[0]
    magnitude = rng.uniform(1.0, 3.0)
    dx, dy = motion_field(label, n, magnitude, rng)
    mask = np.hypot(dx, dy) > 0
    # apex(x) = onset(x - d(x)) for small smooth d
    apex = warp(face, -dx, -dy)
    if profile.jitter > 0:
        angle = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(0, profile.jitter)
        apex = warp(apex, np.full_like(apex, -r * np.cos(angle)), np.full_like(apex, -r * np.sin(angle)))
    return apply_profile(face, profile, rng), apply_profile(apex, profile, rng), mask


def generate_dataset(out_dir, subjects: int = 12, samples_per_subject: int = 9, domains=None, seed: int = 0,
                     shift_scale: float = 1.0, clean: bool = False) -> Manifest:
    """Write frames, motion masks and ``manifest.jsonl`` under ``out_dir``.

    ``domains`` is a sequence of :class:`DomainProfile` or a count taken from
    :data:`DEFAULT_DOMAINS`.  Subjects are assigned to domains round-robin and
    labels cycle over the classes in sample order.  ``shift_scale`` scales the
    domain shift; ``clean`` removes noise and jitter from every profile.
    """
    if domains is None:
        domains = DEFAULT_DOMAINS
    elif isinstance(domains, int):
        if not 1 <= domains <= len(DEFAULT_DOMAINS):
            raise DataError(f"domains must be between 1 and {len(DEFAULT_DOMAINS)}")
        domains = DEFAULT_DOMAINS[:domains]
    domains = [d.scaled(shift_scale) for d in domains]
    if clean:
        domains = [d.clean() for d in domains]
    if not subjects >= len(domains) >= 1:
        raise DataError("need subjects >= domains >= 1")
    if samples_per_subject < 1:
        raise DataError("samples_per_subject must be >= 1")
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc

    records = []
    for s in range(subjects):
        subject = f"sub{s:02d}"
        profile = domains[s % len(domains)]
        face = base_face(profile.resolution, stream_rng(seed, subject))
        for k in range(samples_per_subject):
            sid = f"{subject}_{k:02d}"
            label = LABELS[(s * samples_per_subject + k) % len(LABELS)]
            onset, apex, mask = render_sample(face, label, profile, stream_rng(seed, sid))
            paths = {kind: f"frames/{sid}_{kind}.pgm" for kind in ("onset", "apex", "mask")}
            try:
                write_pgm(out / paths["onset"], onset)
                write_pgm(out / paths["apex"], apex)
                write_pgm(out / paths["mask"], mask.astype(np.uint8) * 255)
            except OSError as exc:
                raise DataError(f"cannot write frames for {sid}: {exc}") from exc
            records.append(SampleRecord(sid, subject, profile.name, label, paths["onset"], paths["apex"],
                                        mask_path=paths["mask"]))
    meta = {
        "generator": "synthetic",
        "seed": seed,
        "subjects": subjects,
        "samples_per_subject": samples_per_subject,
        "shift_scale": shift_scale,
        "clean": clean,
        "domains": [asdict(d) for d in domains],
    }
    manifest = Manifest(records, meta, out)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest


def attention_favoring_maps(n_per_class: int = 12, subjects: int = 10, resolution: int = 20, border: int = 5,
                            signal: float = 1.0, distractor: float = 3.0, seed: int = 0):
    """Flow maps whose class signal sits in the centre, surrounded by a noisy border.

    The border carries strong, smooth, label-independent motion; the centre
    carries a weak class-specific displacement pattern.  Returns
    ``(x [N,3,R,R] float32, labels, subjects)``.
    """
    rng = np.random.default_rng(seed)
    r = resolution
    u, v = _grid(r)
    inner = np.zeros((r, r), dtype=bool)
    inner[border:r - border, border:r - border] = True
    xs, ys, subj = [], [], []
    for c in range(len(LABELS)):
        for i in range(n_per_class):
            bump = _bump(u, v, 0.5 + rng.uniform(-0.05, 0.05), 0.5 + rng.uniform(-0.05, 0.05), 0.22, 0.22)
            ang = 2 * np.pi * c / len(LABELS) + rng.normal(0, 0.2)
            vx = signal * np.cos(ang) * bump
            vy = signal * np.sin(ang) * bump
            for chan in (vx, vy):
                noise = ndimage.gaussian_filter(rng.standard_normal((r, r)), 1.0)
                chan[~inner] = distractor * noise[~inner] / (np.abs(noise).max() + 1e-12)
            vz = np.hypot(*np.gradient(vx)) + np.hypot(*np.gradient(vy))
            xs.append(np.stack([vx, vy, vz]))
            ys.append(c)
            subj.append(f"sub{(c * n_per_class + i) % subjects:02d}")
    return np.asarray(xs, dtype=np.float32), np.asarray(ys), np.asarray(subj)
