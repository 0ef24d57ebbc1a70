"""Synthetic tracklet benchmark and image-folder manifest loading.

Identities are deterministic colored-shape templates rendered under a set
of view transforms (mirror / shift / scale). Views are split across two
disjoint camera pools so cross-camera retrieval is well-posed. Frames can
be near-duplicates of their predecessor (redundancy), occluded by a blank
band, or fresh renders from a new view; per-frame provenance flags record
which.

Manifest format (UTF-8 text, one tracklet per line):

    <tracklet_id>\\t<identity>\\t<camera>\\t<path1>,<path2>,...

Frame paths are relative to the manifest file. Any lossless raster format
Pillow can read works; the exporter writes 8-bit PNG.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

NUM_CAMERAS = 2


@dataclass(frozen=True)
class SyntheticConfig:
    num_identities: int = 16
    tracklets_per_identity: int = 4
    frames_per_tracklet: int = 8
    image_shape: tuple[int, int, int] = (3, 32, 16)
    num_views: int = 4
    duplicate_prob: float = 0.3
    occlusion_prob: float = 0.2
    noise_sigma: float = 0.05
    dup_sigma: float = 0.004
    seed: int = 0

    def __post_init__(self):
        if self.num_views < 2:
            raise ValueError("need at least 2 views to form two camera pools")
        if self.num_identities < 1:
            raise ValueError("num_identities must be positive")
        if self.tracklets_per_identity < NUM_CAMERAS:
            raise ValueError(
                f"need at least {NUM_CAMERAS} tracklets per identity so every "
                "identity appears under every camera")
        if self.frames_per_tracklet < 1:
            raise ValueError("frames_per_tracklet must be positive")
        if not 0.0 <= self.duplicate_prob <= 1.0:
            raise ValueError("duplicate_prob must be in [0, 1]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")


@dataclass
class TrackletRecord:
    tracklet_id: str
    identity: int
    camera: int
    frames: np.ndarray  # [L, C, H, W] float64 in [0, 1]
    is_duplicate: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    is_occluded: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    is_distinct: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def __post_init__(self):
        length = self.frames.shape[0]
        if length < 1:
            raise ValueError(f"tracklet {self.tracklet_id} has no frames")
        for name in ("is_duplicate", "is_occluded", "is_distinct"):
            arr = getattr(self, name)
            if arr.shape[0] == 0:
                setattr(self, name, np.zeros(length, bool))
            elif arr.shape[0] != length:
                raise ValueError(f"flag array {name} length {arr.shape[0]} "
                                 f"does not match {length} frames")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class TestSplit:
    query: list[TrackletRecord]
    gallery: list[TrackletRecord]
    excluded_identities: list[int] = field(default_factory=list)


def _make_template(rng: np.random.Generator,
                   shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    img = np.empty((c, h, w))
    bg = rng.uniform(0.05, 0.3, c)
    img[:] = bg[:, None, None]

    def block(r0, r1, c0, c1, color):
        img[:, int(r0 * h):int(r1 * h), int(c0 * w):int(c1 * w)] = \
            color[:, None, None]

    block(0.10, 0.32, 0.32, 0.68, rng.uniform(0.4, 1.0, c))   # head
    block(0.34, 0.72, 0.22, 0.78, rng.uniform(0.3, 1.0, c))   # torso
    block(0.74, 0.98, 0.26, 0.46, rng.uniform(0.2, 0.9, c))   # left leg
    block(0.74, 0.98, 0.54, 0.74, rng.uniform(0.2, 0.9, c))   # right leg
    # Identity-specific marker patch at a random torso position.
    r0 = rng.uniform(0.36, 0.60)
    c0 = rng.uniform(0.24, 0.60)
    block(r0, r0 + 0.12, c0, c0 + 0.18, rng.uniform(0.0, 1.0, c))
    return img


def _view_params(view: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, 11, view])
    return {
        "mirror": bool(view % 2),
        "shift_x": int(rng.integers(-3, 4)),
        "shift_y": int(rng.integers(-2, 3)),
        "scale": float(rng.choice([0.85, 1.0, 1.15])),
    }


def _render_view(template: np.ndarray, params: dict) -> np.ndarray:
    _, h, w = template.shape
    scale = params["scale"]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = np.clip(np.round((np.arange(h) - cy) / scale + cy - params["shift_y"]),
                 0, h - 1).astype(int)
    xs = np.clip(np.round((np.arange(w) - cx) / scale + cx - params["shift_x"]),
                 0, w - 1).astype(int)
    out = template[:, ys][:, :, xs]
    if params["mirror"]:
        out = out[:, :, ::-1]
    return out.copy()


def _occlude(frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h = frame.shape[1]
    band = max(2, h // 4)
    start = int(rng.integers(0, h - band + 1))
    out = frame.copy()
    out[:, start:start + band, :] = 0.0
    return out


def camera_views(cfg: SyntheticConfig, camera: int) -> list[int]:
    """Disjoint view pools: camera 0 owns the first half of the views."""
    half = cfg.num_views // 2
    if camera == 0:
        return list(range(half))
    return list(range(half, cfg.num_views))


def generate(cfg: SyntheticConfig) -> list[TrackletRecord]:
    """Deterministic synthetic dataset; identical seeds give identical bits."""
    templates = [
        _make_template(np.random.default_rng([cfg.seed, 7, i]), cfg.image_shape)
        for i in range(cfg.num_identities)
    ]
    views = [_view_params(v, cfg.seed) for v in range(cfg.num_views)]

    records = []
    base = cfg.tracklets_per_identity // NUM_CAMERAS
    extra = cfg.tracklets_per_identity % NUM_CAMERAS
    for identity in range(cfg.num_identities):
        for camera in range(NUM_CAMERAS):
            pool = camera_views(cfg, camera)
            count = base + (1 if camera < extra else 0)
            for k in range(count):
                rng = np.random.default_rng([cfg.seed, 13, identity, camera, k])
                records.append(_generate_tracklet(
                    cfg, templates[identity], views, pool, identity, camera, k,
                    rng))
    return records


def _fresh_frame(cfg, template, views, view, rng):
    frame = _render_view(template, views[view])
    occluded = rng.random() < cfg.occlusion_prob
    if occluded:
        frame = _occlude(frame, rng)
    if cfg.noise_sigma > 0:
        frame = frame + rng.normal(0.0, cfg.noise_sigma, frame.shape)
    return np.clip(frame, 0.0, 1.0), occluded


def _generate_tracklet(cfg, template, views, pool, identity, camera, k, rng):
    length = cfg.frames_per_tracklet
    frames = np.empty((length,) + cfg.image_shape)
    dup = np.zeros(length, bool)
    occ = np.zeros(length, bool)
    distinct = np.zeros(length, bool)

    view = int(rng.choice(pool))
    frames[0], occ[0] = _fresh_frame(cfg, template, views, view, rng)
    distinct[0] = True
    for i in range(1, length):
        if rng.random() < cfg.duplicate_prob:
            # Duplicate run: copy the previous frame with bounded noise so
            # the max-norm difference stays below dup_sigma.
            noise = rng.uniform(-cfg.dup_sigma / 2, cfg.dup_sigma / 2,
                                cfg.image_shape)
            frames[i] = np.clip(frames[i - 1] + noise, 0.0, 1.0)
            dup[i] = True
            occ[i] = occ[i - 1]
        else:
            others = [v for v in pool if v != view] or pool
            view = int(rng.choice(others))
            frames[i], occ[i] = _fresh_frame(cfg, template, views, view, rng)
            distinct[i] = True
    return TrackletRecord(f"id{identity:04d}_c{camera}_t{k}", identity, camera,
                          frames, dup, occ, distinct)


def make_probe_tracklet(cfg: SyntheticConfig, num_duplicates: int,
                        seed: int) -> TrackletRecord:
    """Redundant probe: ``num_duplicates`` near-identical frames plus one
    frame rendered from a different view, at a random position.

    Used to check that inter-frame attention rewards the distinct frame.
    """
    if num_duplicates < 1:
        raise ValueError("need at least one duplicated frame")
    rng = np.random.default_rng([seed, 17])
    template = _make_template(np.random.default_rng([seed, 7, 0]),
                              cfg.image_shape)
    views = [_view_params(v, cfg.seed) for v in range(cfg.num_views)]
    pool = camera_views(cfg, 0)
    base_view = int(rng.choice(pool))
    others = [v for v in range(cfg.num_views) if v != base_view]
    distinct_view = int(rng.choice(others))

    base = np.clip(_render_view(template, views[base_view])
                   + rng.normal(0.0, cfg.noise_sigma, cfg.image_shape), 0, 1)
    length = num_duplicates + 1
    pos = int(rng.integers(0, length))
    frames = np.empty((length,) + cfg.image_shape)
    distinct = np.zeros(length, bool)
    dup = np.zeros(length, bool)
    for i in range(length):
        if i == pos:
            frames[i] = np.clip(
                _render_view(template, views[distinct_view])
                + rng.normal(0.0, cfg.noise_sigma, cfg.image_shape), 0, 1)
            distinct[i] = True
        else:
            noise = rng.uniform(-cfg.dup_sigma / 2, cfg.dup_sigma / 2,
                                cfg.image_shape)
            frames[i] = np.clip(base + noise, 0.0, 1.0)
            dup[i] = True
    return TrackletRecord(f"probe_k{num_duplicates}_s{seed}", 0, 0, frames,
                          dup, np.zeros(length, bool), distinct)


# ---------------------------------------------------------------------------
# manifest export / import


def export_manifest(records: list[TrackletRecord], out_dir) -> Path:
    """Write frames as PNG files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    image_root = out_dir / "images"
    image_root.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        tdir = image_root / str(rec.tracklet_id)
        tdir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, frame in enumerate(rec.frames):
            img = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
            if img.shape[0] == 1:
                pil = Image.fromarray(img[0], mode="L")
            elif img.shape[0] == 3:
                pil = Image.fromarray(img.transpose(1, 2, 0), mode="RGB")
            else:
                raise ValueError(f"cannot export {img.shape[0]}-channel frames")
            rel = Path("images") / str(rec.tracklet_id) / f"frame_{i:04d}.png"
            pil.save(out_dir / rel)
            paths.append(str(rel))
        lines.append(f"{rec.tracklet_id}\t{rec.identity}\t{rec.camera}\t"
                     f"{','.join(paths)}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""),
                        encoding="utf-8")
    return manifest


def _load_image(path: Path, shape: tuple[int, int, int] | None) -> np.ndarray:
    with Image.open(path) as pil:
        if shape is not None and shape[0] == 1:
            pil = pil.convert("L")
        else:
            pil = pil.convert("RGB")
        if shape is not None and pil.size != (shape[2], shape[1]):
            pil = pil.resize((shape[2], shape[1]), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return arr.transpose(2, 0, 1)


def load_manifest(path, image_shape: tuple[int, int, int] | None = None,
                  ) -> list[TrackletRecord]:
    """Parse a manifest and load its frames as float tensors in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                 start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise ValueError(
                f"{path}:{lineno}: expected 4 tab-separated fields, "
                f"got {len(parts)}")
        tid, identity_s, camera_s, paths_s = parts
        try:
            identity = int(identity_s)
            camera = int(camera_s)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad identity/camera: {exc}")
        frame_paths = [p for p in paths_s.split(",") if p]
        if not frame_paths:
            raise ValueError(f"{path}:{lineno}: tracklet has no frames")
        frames = []
        for rel in frame_paths:
            fpath = root / rel
            if not fpath.exists():
                raise FileNotFoundError(f"{path}:{lineno}: missing frame {fpath}")
            try:
                frames.append(_load_image(fpath, image_shape))
            except (OSError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: cannot read {fpath}: {exc}")
        stackable = np.stack(frames)
        records.append(TrackletRecord(tid, identity, camera, stackable))
    return records


# ---------------------------------------------------------------------------
# splitting and frame sampling


def split(records: list[TrackletRecord], train_fraction: float,
          seed: int) -> tuple[list[TrackletRecord], TestSplit]:
    """Identity-disjoint train/test split with a query/gallery partition.

    Within the test set, each identity's lowest-camera tracklets become
    queries and the rest gallery; identities seen under a single camera
    are excluded (with a warning) since they cannot be matched cross-camera.
    """
    identities = sorted({r.identity for r in records})
    if len(identities) < 2:
        raise ValueError("need at least 2 identities to split")
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError("train_fraction must be in [0, 1]")
    rng = np.random.default_rng([seed, 23])
    order = list(rng.permutation(identities))
    n_train = int(round(train_fraction * len(identities)))
    train_ids = set(order[:n_train])

    train = [r for r in records if r.identity in train_ids]
    test_records = [r for r in records if r.identity not in train_ids]
    by_id: dict[int, list[TrackletRecord]] = {}
    for r in test_records:
        by_id.setdefault(r.identity, []).append(r)

    query, gallery, excluded = [], [], []
    for identity in sorted(by_id):
        recs = by_id[identity]
        cams = sorted({r.camera for r in recs})
        if len(cams) < 2:
            excluded.append(identity)
            continue
        for r in recs:
            (query if r.camera == cams[0] else gallery).append(r)
    if excluded:
        logger.warning("excluded %d single-camera identities from the test "
                       "set: %s", len(excluded), excluded)
    return train, TestSplit(query, gallery, excluded)


def sample_frames_train(frames: np.ndarray, length: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Chunked random sampling: one frame from each of ``length`` chunks."""
    total = frames.shape[0]
    if total <= length:
        idx = np.resize(np.arange(total), length)
    else:
        bounds = np.linspace(0, total, length + 1).astype(int)
        idx = np.array([int(rng.integers(lo, max(lo + 1, hi)))
                        for lo, hi in zip(bounds[:-1], bounds[1:])])
    return frames[idx]


def sample_frames_eval(frames: np.ndarray, length: int) -> np.ndarray:
    """Evenly spaced deterministic sampling."""
    total = frames.shape[0]
    if total <= length:
        idx = np.resize(np.arange(total), length)
    else:
        idx = np.linspace(0, total - 1, length).round().astype(int)
    return frames[idx]
