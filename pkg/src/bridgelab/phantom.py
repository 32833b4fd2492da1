"""Synthetic head phantoms with injectable shade artifacts.

Each subject is a seeded family of 2D slices: an elliptical bone ring, a
soft-tissue interior, and a few internal structures whose geometry drifts
smoothly along the slice axis. The shade artifact is a smooth darkening
field supported on the posterior half of the soft-tissue region; a
deterministic pseudo-corrector stands in for a pretrained translation
network, fully fixing mild artifacts and leaving a 40% residual on severe
ones (the failure mode the preference loop is meant to repair).

All generation is a pure function of the seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
import json

import numpy as np
from scipy.ndimage import distance_transform_edt

from .training import LabeledPair

BONE = 0.9
SOFT = 0.45
SHADE_AMPLITUDE = 0.35     # peak darkening at severity 1
NOISE_SIGMA = 0.01
RESIDUAL_FRACTION = 0.4    # shade left behind on failed corrections
FAIL_SEVERITY = 0.5        # corrector gives up above this
GOOD_RESIDUAL_AMP = 0.038  # smooth imprint left even on successful cases (0.019 RMSE)
BAD_FRACTION = 0.15        # severity mass above the failure threshold


@dataclass
class Phantom:
    clean: np.ndarray
    artifact_mask: np.ndarray  # bool, posterior soft tissue
    severity: float
    subject: str
    slice_id: int
    subject_seed: int = 0

    def __post_init__(self) -> None:
        if self.clean.shape != self.artifact_mask.shape:
            raise ValueError("clean image and mask must share a shape")
        if self.severity > 0 and not self.artifact_mask.any():
            raise ValueError("severity > 0 requires a nonempty artifact mask")


def _smooth_inside(d: np.ndarray, width: float) -> np.ndarray:
    """0/1 soft indicator from a signed 'inside-ness' value d (px units)."""
    return 1.0 / (1.0 + np.exp(-np.clip(d / width, -40, 40)))


def make_phantom(subject_seed: int, slice_index: int, size: int) -> Phantom:
    """Deterministic skull-like slice; geometry drifts smoothly with slice."""
    if size < 8 or size % 4 != 0:
        raise ValueError(f"size must be a multiple of 4 and >= 8, got {size}")

    rng = np.random.default_rng(subject_seed)
    # per-subject anatomy (independent of slice)
    ax0 = 0.74 + 0.08 * rng.random()
    ay0 = 0.82 + 0.08 * rng.random()
    ring = 0.09 + 0.02 * rng.random()
    n_inner = int(rng.integers(2, 5))
    inner = []
    for _ in range(n_inner):
        inner.append(
            dict(
                cx=rng.uniform(-0.35, 0.35),
                cy=rng.uniform(-0.4, 0.3),
                rx=rng.uniform(0.08, 0.2),
                ry=rng.uniform(0.08, 0.2),
                val=rng.uniform(0.25, 0.65),
                phase=rng.uniform(0, 2 * np.pi),
            )
        )

    # smooth slice modulation, a few percent per step
    s = slice_index / 16.0
    scale = 1.0 + 0.04 * np.sin(2 * np.pi * s * 0.25)
    ax, ay = ax0 * scale, ay0 * scale

    yy, xx = np.mgrid[0:size, 0:size]
    x = (xx - (size - 1) / 2) / (size / 2)
    y = (yy - (size - 1) / 2) / (size / 2)

    # elliptical radius: 1 on the outer skull boundary
    r_out = np.sqrt((x / ax) ** 2 + (y / ay) ** 2)
    px = size / 2  # normalized-to-pixel factor for edge softness
    edge = 1.5 / px
    outer = _smooth_inside((1.0 - r_out) / edge, 1.0)
    r_in = np.sqrt((x / (ax - ring)) ** 2 + (y / (ay - ring)) ** 2)
    interior = _smooth_inside((1.0 - r_in) / edge, 1.0)

    img = np.zeros((size, size))
    img += BONE * (outer - interior)  # bone ring
    img += SOFT * interior            # soft tissue

    for e in inner:
        amp = 1.0 + 0.06 * np.sin(2 * np.pi * s * 0.25 + e["phase"])
        rr = np.sqrt(((x - e["cx"]) / (e["rx"] * amp)) ** 2 + ((y - e["cy"]) / (e["ry"] * amp)) ** 2)
        blob = _smooth_inside((1.0 - rr) / (3.0 / px), 1.0)
        img = img * (1 - blob * interior) + e["val"] * blob * interior

    img = np.clip(img, 0.0, 1.0)

    # posterior (lower) half of the soft tissue, eroded off the bone
    r_soft = np.sqrt((x / (ax - ring - 0.06)) ** 2 + (y / (ay - ring - 0.06)) ** 2)
    mask = (r_soft < 1.0) & (y > 0.12)

    return Phantom(
        clean=img,
        artifact_mask=mask,
        severity=0.0,
        subject=f"seed{subject_seed}",
        slice_id=slice_index,
        subject_seed=subject_seed,
    )


def shade_field(p: Phantom, severity: float) -> np.ndarray:
    """Smooth darkening field: plateau inside the mask, zero outside."""
    if not p.artifact_mask.any() or severity == 0.0:
        return np.zeros_like(p.clean)
    d = distance_transform_edt(p.artifact_mask)
    bump = np.clip(d / 2.5, 0.0, 1.0)
    return -SHADE_AMPLITUDE * severity * bump


def inject_shade(p: Phantom, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Corrupted source image: clean + shade field + mild global noise."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must be in [0, 1], got {severity}")
    return p.clean + shade_field(p, severity) + NOISE_SIGMA * rng.standard_normal(p.clean.shape)


def _good_residual(p: Phantom) -> np.ndarray:
    """Small smooth imprint the corrector leaves even when it succeeds."""
    size = p.clean.shape[0]
    rng = np.random.default_rng(p.subject_seed + 104729)
    phase_x, phase_y = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    gx = np.sin(2 * np.pi * xx / size + phase_x)
    gy = np.sin(2 * np.pi * yy / size + phase_y)
    return GOOD_RESIDUAL_AMP * gx * gy


def pseudo_prior(z0: np.ndarray, p: Phantom) -> tuple[np.ndarray, str]:
    """Deterministic stand-in corrector producing the training target.

    Mild cases come back essentially clean; severe cases keep a fixed
    fraction of the injected shade (mode-collapse-like failure).
    """
    if z0.shape != p.clean.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {p.clean.shape}")
    if p.severity <= FAIL_SEVERITY:
        return p.clean + _good_residual(p), "good"
    return p.clean + RESIDUAL_FRACTION * shade_field(p, p.severity), "bad"


def oracle_artifact_score(img: np.ndarray, p: Phantom) -> float:
    """Mean absolute deviation from the clean phantom inside the mask."""
    if img.shape != p.clean.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {p.clean.shape}")
    m = p.artifact_mask
    if not m.any():
        return 0.0
    return float(np.abs(img[m] - p.clean[m]).mean())


def _draw_severity(rng: np.random.Generator) -> float:
    """Severity draw: uniform within each regime, with the clinical ~85/15
    mild/severe imbalance (the corrector fails only above FAIL_SEVERITY)."""
    if rng.random() < BAD_FRACTION:
        return rng.uniform(FAIL_SEVERITY, 1.0)
    return rng.uniform(0.0, FAIL_SEVERITY)


@dataclass
class PhantomDataset:
    train: list[LabeledPair]
    test: list[LabeledPair]
    phantoms: dict[tuple[str, int], Phantom]
    size: int
    seed: int

    def phantom_for(self, pair: LabeledPair) -> Phantom:
        return self.phantoms[(pair.subject, pair.slice_id)]


def make_dataset(
    n_subjects: int,
    slices_per_subject: int,
    size: int,
    seed: int,
    train_fraction: float = 0.85,
) -> PhantomDataset:
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects for a subject-level split")
    root_ss = np.random.SeedSequence(seed)
    n_train = min(max(int(round(train_fraction * n_subjects)), 1), n_subjects - 1)

    train: list[LabeledPair] = []
    test: list[LabeledPair] = []
    phantoms: dict[tuple[str, int], Phantom] = {}

    for si in range(n_subjects):
        subject = f"s{si:03d}"
        sub_ss = np.random.SeedSequence(entropy=seed, spawn_key=(si,))
        subject_seed = int(sub_ss.generate_state(1)[0])
        sev_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(si, 1)))
        noise_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(si, 2)))
        bucket = train if si < n_train else test
        for sl in range(slices_per_subject):
            p = make_phantom(subject_seed, sl, size)
            severity = float(_draw_severity(sev_rng))
            p = replace(p, severity=severity, subject=subject)
            z0 = inject_shade(p, severity, noise_rng)
            z1, quality = pseudo_prior(z0, p)
            pair = LabeledPair(
                z0=z0, z1=z1, r=0 if quality == "good" else 1,
                subject=subject, slice_id=sl,
            )
            bucket.append(pair)
            phantoms[(subject, sl)] = p

    return PhantomDataset(train=train, test=test, phantoms=phantoms, size=size, seed=seed)


def build_dataset(
    n_subjects: int, slices_per_subject: int, size: int, seed: int
) -> tuple[list[LabeledPair], list[LabeledPair]]:
    ds = make_dataset(n_subjects, slices_per_subject, size, seed)
    return ds.train, ds.test


# ---------------------------------------------------------------------------
# export / import


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Flat run lengths alternating zeros/ones, starting with zeros."""
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    runs: list[int] = []
    current, count = 0, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = int(v), 1
    runs.append(count)
    return runs


def rle_to_mask(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for run in runs:
        if val:
            flat[pos : pos + run] = True
        pos += run
        val = not val
    if pos != flat.size:
        raise ValueError("run lengths do not cover the mask")
    return flat.reshape(shape)


def export_dataset(ds: PhantomDataset, root: str | Path) -> None:
    """One directory per subject with z0/z1 images and per-slice metadata."""
    from .imgio import write_image

    root = Path(root)
    for split_name, pairs in (("train", ds.train), ("test", ds.test)):
        for pair in pairs:
            p = ds.phantom_for(pair)
            sdir = root / pair.subject
            sdir.mkdir(parents=True, exist_ok=True)
            write_image(sdir / f"z0_{pair.slice_id:03d}.img", pair.z0)
            write_image(sdir / f"z1_{pair.slice_id:03d}.img", pair.z1)
            meta_path = sdir / "meta.json"
            meta = (
                json.loads(meta_path.read_text())
                if meta_path.exists()
                else {
                    "subject": pair.subject,
                    "subject_seed": p.subject_seed,
                    "size": ds.size,
                    "split": split_name,
                    "slices": {},
                }
            )
            meta["slices"][str(pair.slice_id)] = {
                "severity": p.severity,
                "label": pair.r,
                "mask_rle": mask_to_rle(p.artifact_mask),
            }
            meta_path.write_text(json.dumps(meta))


def load_dataset(root: str | Path) -> PhantomDataset:
    from .imgio import read_image

    root = Path(root)
    train: list[LabeledPair] = []
    test: list[LabeledPair] = []
    phantoms: dict[tuple[str, int], Phantom] = {}
    size = 0
    for sdir in sorted(d for d in root.iterdir() if d.is_dir()):
        meta = json.loads((sdir / "meta.json").read_text())
        subject = meta["subject"]
        size = meta["size"]
        bucket = train if meta["split"] == "train" else test
        for sl_str, info in sorted(meta["slices"].items(), key=lambda kv: int(kv[0])):
            sl = int(sl_str)
            p = make_phantom(meta["subject_seed"], sl, size)
            p = replace(p, severity=info["severity"], subject=subject)
            z0 = read_image(sdir / f"z0_{sl:03d}.img")
            z1 = read_image(sdir / f"z1_{sl:03d}.img")
            bucket.append(LabeledPair(z0=z0, z1=z1, r=info["label"], subject=subject, slice_id=sl))
            phantoms[(subject, sl)] = p
    return PhantomDataset(train=train, test=test, phantoms=phantoms, size=size, seed=-1)
