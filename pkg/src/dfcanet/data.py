"""Manifest-driven dataset handling and the synthetic iris generator.

Manifests are UTF-8 CSV files with header ``path,lens_class,sensor,dataset``
plus an optional ``split`` column; relative image paths resolve against the
manifest's directory (or ``DFCANET_DATA_ROOT`` when set).  Labels are
derived from the lens class under a relabeling policy: normal is bonafide,
textured/print/scan are attacks, and soft lenses go wherever the policy
says.

The synthetic generator writes deterministic procedural eye images:
concentric band-limited ring texture around a dark pupil for bonafide
samples, with class-specific overlays (dot lattice, low-contrast film
annulus, halftone grid plus blur) and two sensor profiles that differ in
gamma and noise.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError
from .layers import interp_matrix

LENS_CLASSES = ("normal", "soft", "textured", "print", "scan")
ALWAYS_ATTACK = {"textured", "print", "scan"}
BONAFIDE, ATTACK = "bonafide", "attack"

ENV_DATA_ROOT = "DFCANET_DATA_ROOT"


@dataclass(frozen=True)
class RelabelPolicy:
    soft_lens_as: str = ATTACK

    def __post_init__(self):
        if self.soft_lens_as not in (ATTACK, BONAFIDE):
            raise ValueError(f"soft_lens_as must be 'attack' or 'bonafide', got {self.soft_lens_as!r}")


def label_for(lens_class: str, policy: RelabelPolicy) -> str:
    if lens_class == "normal":
        return BONAFIDE
    if lens_class in ALWAYS_ATTACK:
        return ATTACK
    if lens_class == "soft":
        return policy.soft_lens_as
    raise DataError(f"unknown lens class {lens_class!r}")


@dataclass
class SampleRecord:
    path: str
    lens_class: str
    sensor: str
    dataset: str
    split: str = "unassigned"
    label: str = ""


def load_manifest(path, policy: RelabelPolicy, data_root=None) -> list[SampleRecord]:
    """Parse a manifest and attach binary labels under ``policy``.

    Every referenced image must exist; missing files are reported together.
    """
    root = data_root or os.environ.get(ENV_DATA_ROOT) or os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest file (missing header)")
        base = ["path", "lens_class", "sensor", "dataset"]
        if header[:4] != base or header[4:] not in ([], ["split"]):
            raise DataError(f"{path}: bad header {header!r}, expected {base} [+ split]")
        has_split = len(header) == 5
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rel, lens_class, sensor, dataset = row[:4]
            if lens_class not in LENS_CLASSES:
                raise DataError(
                    f"{path}:{lineno}: unknown lens_class {lens_class!r} "
                    f"(expected one of {', '.join(LENS_CLASSES)})"
                )
            split = row[4] if has_split and row[4] else "unassigned"
            if split not in ("train", "test", "unassigned"):
                raise DataError(f"{path}:{lineno}: bad split value {split!r}")
            full = rel if os.path.isabs(rel) else os.path.join(root, rel)
            records.append(SampleRecord(full, lens_class, sensor, dataset, split,
                                        label_for(lens_class, policy)))
    missing = [r.path for r in records if not os.path.isfile(r.path)]
    if missing:
        raise DataError(f"{path}: {len(missing)} missing image file(s): " + ", ".join(missing))
    return records


# -- decoding / resizing -----------------------------------------------------


def decode_image(path) -> np.ndarray:
    """Read an 8-bit PNG/BMP as float (H,W,3) in [0,1], gray replicated."""
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "BMP"):
                raise DataError(f"{path}: unsupported image format {fmt!r} (PNG/BMP only)")
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float32) / 255.0
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            elif im.mode == "RGB":
                arr = np.asarray(im, dtype=np.float32) / 255.0
            else:
                raise DataError(f"{path}: unsupported mode {im.mode!r} (8-bit gray or RGB only)")
    except DataError:
        raise
    except Exception as e:  # PIL raises several types for corrupt files
        raise DataError(f"{path}: cannot decode image ({e})")
    return arr


def bilinear_resize(arr: np.ndarray, target) -> np.ndarray:
    """Half-pixel-center bilinear resampling of (H,W,C); up or down."""
    th, tw = target
    h, w = arr.shape[:2]
    if (h, w) == (th, tw):
        return arr.copy()
    r = interp_matrix(th, h, np.float64)
    s = interp_matrix(tw, w, np.float64)
    out = np.einsum("ah,hwc,bw->abc", r, arr.astype(np.float64), s, optimize=True)
    return out.astype(arr.dtype)


def decode_and_resize(path, target=(224, 224)) -> np.ndarray:
    return bilinear_resize(decode_image(path), target)


# -- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    shift_fraction: float = 0.1
    shear_degrees: float = 10.0
    seed: int = 0


def affine_warp(img: np.ndarray, dx: float, dy: float, shear_deg: float) -> np.ndarray:
    """Shift by (dx right, dy down) and shear horizontally about the image
    center; bilinear sampling with zero fill outside the source."""
    h, w = img.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    s = math.tan(math.radians(shear_deg))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    qx = xs - dx - cx
    qy = ys - dy - cy
    sx = qx - s * qy + cx
    sy = qy + cy

    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    tx = sx - x0
    ty = sy - y0
    out = np.zeros_like(img, dtype=np.float64)
    for oy, ox, wgt in ((y0, x0, (1 - ty) * (1 - tx)), (y0, x0 + 1, (1 - ty) * tx),
                        (y0 + 1, x0, ty * (1 - tx)), (y0 + 1, x0 + 1, ty * tx)):
        valid = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        oy_c = np.clip(oy, 0, h - 1)
        ox_c = np.clip(ox, 0, w - 1)
        out += (wgt * valid)[..., None] * img[oy_c, ox_c, :]
    return out.astype(img.dtype)


def augment(img: np.ndarray, cfg: AugmentConfig, per_sample_seed: int) -> np.ndarray:
    """Random shift/shear, fully determined by (cfg.seed, per_sample_seed)."""
    if cfg.shift_fraction == 0.0 and cfg.shear_degrees == 0.0:
        return img
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, per_sample_seed]))
    h, w = img.shape[:2]
    dx = rng.uniform(-1.0, 1.0) * cfg.shift_fraction * w
    dy = rng.uniform(-1.0, 1.0) * cfg.shift_fraction * h
    shear = rng.uniform(-1.0, 1.0) * cfg.shear_degrees
    return affine_warp(img, dx, dy, shear)


# -- protocol splits -------------------------------------------------------------

PROTOCOL_KINDS = ("intra", "inter", "combined", "cross_database", "incremental", "lens_detection")


@dataclass
class ProtocolSpec:
    """Declarative description of one experiment's train/test construction."""

    kind: str
    train_sensors: tuple = ()
    test_sensors: tuple = ()
    soft_lens_as: str = ATTACK
    split_seed: int = 0
    checkpoint: str | None = None
    test_subsample: int | None = None
    subsample_seed: int = 0

    def __post_init__(self):
        if self.kind not in PROTOCOL_KINDS:
            raise ValueError(f"unknown protocol kind {self.kind!r}")
        if self.kind == "incremental" and not self.checkpoint:
            raise ValueError("incremental protocol requires a pretrained checkpoint path")
        self.train_sensors = tuple(self.train_sensors)
        self.test_sensors = tuple(self.test_sensors)

    def policy(self) -> RelabelPolicy:
        return RelabelPolicy(self.soft_lens_as)


def _provided_split(rows):
    if rows and all(r.split in ("train", "test") for r in rows):
        train = [r for r in rows if r.split == "train"]
        test = [r for r in rows if r.split == "test"]
        return train, test
    return None


def _holdout(rows, seed, key):
    """Seeded stratified 50-50 split; honours a provided split column when
    every row carries one."""
    provided = _provided_split(rows)
    if provided is not None:
        return provided
    groups = {}
    for r in sorted(rows, key=lambda r: r.path):
        groups.setdefault(key(r), []).append(r)
    train, test = [], []
    for gi, gkey in enumerate(sorted(groups)):
        members = groups[gkey]
        rng = np.random.default_rng(np.random.SeedSequence([seed, gi]))
        order = rng.permutation(len(members))
        n_train = (len(members) + 1) // 2
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).append(members[idx])
    return train, test


def make_protocol_splits(records, spec: ProtocolSpec):
    """Build (train, test) record lists per the protocol semantics."""
    sensors_present = {r.sensor for r in records}
    for s in spec.train_sensors + spec.test_sensors:
        if s not in sensors_present:
            raise DataError(f"sensor {s!r} not present in manifest (has {sorted(sensors_present)})")

    def rows_of(sensors):
        return [r for r in records if r.sensor in sensors]

    kind = spec.kind
    if kind == "intra":
        if len(spec.train_sensors) != 1 or (spec.test_sensors and spec.test_sensors != spec.train_sensors):
            raise DataError("intra protocol uses exactly one sensor for both sides")
        train, test = _holdout(rows_of(spec.train_sensors), spec.split_seed, lambda r: r.label)
    elif kind == "inter":
        if len(spec.train_sensors) != 1 or len(spec.test_sensors) != 1 or spec.train_sensors == spec.test_sensors:
            raise DataError("inter protocol uses one training sensor and one different test sensor")
        train, test = rows_of(spec.train_sensors), rows_of(spec.test_sensors)
    elif kind in ("combined", "lens_detection"):
        sensors = spec.train_sensors or tuple(sorted(sensors_present))
        strat = (lambda r: (r.sensor, r.lens_class)) if kind == "lens_detection" else (lambda r: (r.sensor, r.label))
        train, test = _holdout(rows_of(sensors), spec.split_seed, strat)
    elif kind == "cross_database":
        if not spec.train_sensors or not spec.test_sensors:
            raise DataError("cross_database protocol needs explicit train and test sensors")
        if set(spec.train_sensors) & set(spec.test_sensors):
            raise DataError("cross_database train and test sensors must be disjoint")
        train, test = rows_of(spec.train_sensors), rows_of(spec.test_sensors)
    elif kind == "incremental":
        if spec.train_sensors == spec.test_sensors:
            train, test = _holdout(rows_of(spec.train_sensors or tuple(sorted(sensors_present))),
                                   spec.split_seed, lambda r: (r.sensor, r.label))
        else:
            train, test = rows_of(spec.train_sensors), rows_of(spec.test_sensors)
    else:  # unreachable, guarded in __post_init__
        raise DataError(f"unknown protocol kind {kind!r}")

    if spec.test_subsample is not None and spec.test_subsample < len(test):
        rng = np.random.default_rng(np.random.SeedSequence([spec.subsample_seed, 1]))
        keep = rng.choice(len(test), size=spec.test_subsample, replace=False)
        test = [test[i] for i in sorted(keep)]
    if not train or not test:
        raise DataError(f"protocol {kind!r} produced an empty side "
                        f"(train={len(train)}, test={len(test)})")
    return train, test


# -- synthetic generator -----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    sensors: tuple = ("synthA", "synthB")
    dataset: str = "synthetic"
    ring_freqs: tuple = (4.0, 7.0, 11.0)
    ring_amp: float = 0.14
    radial_noise: float = 0.03
    lattice_period: int = 7
    lattice_contrast: float = 0.25
    film_alpha: float = 0.14
    halftone_period: int = 5
    halftone_contrast: float = 0.18
    blur_sigma: float = 1.2


def _sensor_profile(sensor_index: int):
    gamma = 1.0 - 0.18 * sensor_index
    noise = 0.015 * (1 + sensor_index)
    return gamma, noise


def _base_iris(size, rng, cfg: SynthConfig):
    cx = (size - 1) / 2.0 + rng.uniform(-0.02, 0.02) * size
    cy = (size - 1) / 2.0 + rng.uniform(-0.02, 0.02) * size
    pupil_r = rng.uniform(0.14, 0.20)
    iris_r = rng.uniform(0.38, 0.46)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(xs - cx, ys - cy) / (size / 2.0)
    img = np.full((size, size), 0.78)
    band = (r >= pupil_r) & (r <= iris_r)
    u = np.clip((r - pupil_r) / (iris_r - pupil_r), 0.0, 1.0)
    tex = np.full_like(r, 0.45)
    for f in cfg.ring_freqs:
        amp = cfg.ring_amp * rng.uniform(0.5, 1.0) / len(cfg.ring_freqs) * 3.0
        tex += amp * np.sin(2 * np.pi * f * u + rng.uniform(0, 2 * np.pi))
    tex += rng.normal(0.0, cfg.radial_noise, size=(size, size))
    img[band] = tex[band]
    img[r < pupil_r] = 0.06
    return img, r, pupil_r, iris_r


def _gaussian_blur(img, sigma):
    radius = max(1, int(3 * sigma))
    offs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (offs / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, radius, mode="edge")
    rows = sum(k[i] * padded[i : i + img.shape[0], radius:-radius] for i in range(2 * radius + 1))
    padded = np.pad(rows, ((0, 0), (radius, radius)), mode="edge")
    return sum(k[i] * padded[:, i : i + img.shape[1]] for i in range(2 * radius + 1))


def _render(size, sensor_index, lens_class, pair_rng, overlay_rng, cfg: SynthConfig):
    img, r, pupil_r, iris_r = _base_iris(size, pair_rng, cfg)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    band = (r >= pupil_r) & (r <= iris_r)
    if lens_class == "textured":
        phase_x = overlay_rng.uniform(0, cfg.lattice_period)
        phase_y = overlay_rng.uniform(0, cfg.lattice_period)
        dots = np.cos(2 * np.pi * (xs + phase_x) / cfg.lattice_period) \
            * np.cos(2 * np.pi * (ys + phase_y) / cfg.lattice_period)
        img += cfg.lattice_contrast * np.clip(dots, 0.0, 1.0) ** 2 * band
    elif lens_class == "soft":
        rm = iris_r
        halfwidth = 0.35 * iris_r
        prof = 0.5 * (1 + np.cos(np.pi * np.clip(np.abs(r - rm) / halfwidth, 0, 1)))
        img += cfg.film_alpha * prof
    elif lens_class in ("print", "scan"):
        p = cfg.halftone_period
        if lens_class == "print":
            grid = 0.5 * (np.sin(2 * np.pi * xs / p) + np.sin(2 * np.pi * ys / p))
            blur = cfg.blur_sigma
        else:
            grid = 0.5 * (np.sin(2 * np.pi * (xs + ys) / (p * math.sqrt(2)))
                          + np.sin(2 * np.pi * (xs - ys) / (p * math.sqrt(2))))
            blur = cfg.blur_sigma * 1.4
            img += 0.05
        img += cfg.halftone_contrast * grid
        img = _gaussian_blur(img, blur)
    elif lens_class != "normal":
        raise DataError(f"unknown lens class {lens_class!r}")
    gamma, noise = _sensor_profile(sensor_index)
    img = np.clip(img, 0.0, 1.0) ** gamma
    img = img + overlay_rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synth_generate(cfg: SynthConfig, counts: dict, out_root) -> str:
    """Write the synthetic dataset and return the manifest path.

    ``counts`` maps lens class to a total image count, distributed
    round-robin across ``cfg.sensors``.  Identical config and counts yield
    byte-identical files.
    """
    for cls in counts:
        if cls not in LENS_CLASSES:
            raise DataError(f"unknown lens class {cls!r} in counts")
        if counts[cls] < 0:
            raise DataError(f"negative count for {cls!r}")
    total = sum(counts.values())
    if total == 0:
        raise DataError("synthetic generation needs a positive total image count")
    os.makedirs(out_root, exist_ok=True)
    rows = []
    per_sensor_index = {}
    for class_index, cls in enumerate(LENS_CLASSES):
        for idx in range(counts.get(cls, 0)):
            sensor_index = idx % len(cfg.sensors)
            sensor = cfg.sensors[sensor_index]
            pair_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, sensor_index, idx]))
            overlay_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, sensor_index, class_index, idx]))
            img = _render(cfg.image_size, sensor_index, cls, pair_rng, overlay_rng, cfg)
            file_index = per_sensor_index.setdefault((sensor, cls), 0)
            per_sensor_index[(sensor, cls)] = file_index + 1
            rel = os.path.join(sensor, cls, f"{file_index:05d}.png")
            full = os.path.join(out_root, rel)
            os.makedirs(os.path.dirname(full), exist_ok=True)
            Image.fromarray(img, mode="L").save(full, format="PNG")
            rows.append((rel, cls, sensor, cfg.dataset))
    manifest = os.path.join(out_root, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "lens_class", "sensor", "dataset"])
        writer.writerows(rows)
    return manifest
