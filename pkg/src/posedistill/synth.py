"""Procedural stick-figure keypoint dataset.

Each sample is a grayscale image of an articulated figure with coarse body
joints, small fingertip clusters at the wrists, face landmarks on the head
and toe points. Hands and face sit at a fraction of body scale so they are
the hard, fine-grained part of the task.

On-disk layout (format version 1)::

    <root>/manifest.json     counts, keypoint table, split id lists, gen config
    <root>/annotations.txt   one JSON object per line, one sample per line
    <root>/images/NNNNNN.pgm plain (P2) 8-bit graymaps
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .codec import KeypointSet, SimCCTarget, encode

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

BODY_NAMES = ("head", "neck", "pelvis", "l_elbow", "l_wrist", "r_elbow", "r_wrist", "l_ankle", "r_ankle")
# (name, dx, dy) in units of body scale, head frame (x right, y down)
FACE_POINTS = (
    ("l_eye", -0.14, -0.06),
    ("r_eye", 0.14, -0.06),
    ("nose", 0.0, 0.05),
    ("mouth", 0.0, 0.16),
    ("l_brow", -0.14, -0.15),
    ("r_brow", 0.14, -0.15),
    ("l_mouth", -0.09, 0.15),
    ("r_mouth", 0.09, 0.15),
)
FOOT_POINTS = ("l_toe", "r_toe", "l_heel", "r_heel")
MAX_PER_HAND = 5


class DatasetError(RuntimeError):
    pass


@dataclass
class GenConfig:
    num_samples: int = 2500
    image_size: int = 64
    num_body: int = 9
    num_per_hand: int = 4
    num_face: int = 4
    num_foot: int = 2
    occlusion_rate: float = 0.3
    # probability that an in-frame keypoint annotation is dropped (v=0)
    unlabeled_rate: float = 0.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must be in [0, 1]")
        if not 0.0 <= self.unlabeled_rate <= 1.0:
            raise ValueError("unlabeled_rate must be in [0, 1]")
        if not 3 <= self.num_body <= len(BODY_NAMES):
            raise ValueError(f"num_body must be in 3..{len(BODY_NAMES)}")
        if not 0 <= self.num_per_hand <= MAX_PER_HAND:
            raise ValueError(f"num_per_hand must be in 0..{MAX_PER_HAND}")
        if not 0 <= self.num_face <= len(FACE_POINTS):
            raise ValueError(f"num_face must be in 0..{len(FACE_POINTS)}")
        if not 0 <= self.num_foot <= len(FOOT_POINTS):
            raise ValueError(f"num_foot must be in 0..{len(FOOT_POINTS)}")
        if self.num_samples < 1 or self.image_size < 8:
            raise ValueError("need num_samples >= 1 and image_size >= 8")

    @property
    def num_keypoints(self) -> int:
        return self.num_body + 2 * self.num_per_hand + self.num_face + self.num_foot

    def to_dict(self) -> dict:
        return asdict(self)


def keypoint_table(cfg: GenConfig) -> tuple[list[str], list[str]]:
    """Keypoint names and part groups in output order."""
    names = list(BODY_NAMES[: cfg.num_body])
    groups = ["body"] * cfg.num_body
    names += list(FOOT_POINTS[: cfg.num_foot])
    groups += ["foot"] * cfg.num_foot
    names += [p[0] for p in FACE_POINTS[: cfg.num_face]]
    groups += ["face"] * cfg.num_face
    for side in ("l", "r"):
        names += [f"{side}_finger{j}" for j in range(cfg.num_per_hand)]
        groups += ["hand"] * cfg.num_per_hand
    return names, groups


def _unit(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)])


def _seg_dist(xx, yy, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(xx - a[0], yy - a[1])
    t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(xx - (a[0] + t * ab[0]), yy - (a[1] + t * ab[1]))


def _point_seg_dist(p, a, b) -> float:
    return float(_seg_dist(np.array(p[0]), np.array(p[1]), a, b))


class _Canvas:
    def __init__(self, size: int):
        self.img = np.zeros((size, size))
        # pixel centers at integer coordinates
        self.yy, self.xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def _over(self, alpha, value):
        self.img = self.img * (1.0 - alpha) + value * alpha

    def line(self, a, b, half_width, value):
        d = _seg_dist(self.xx, self.yy, a, b)
        self._over(np.clip(half_width + 0.5 - d, 0.0, 1.0), value)

    def blob(self, c, sigma, value):
        d2 = (self.xx - c[0]) ** 2 + (self.yy - c[1]) ** 2
        self._over(np.exp(-d2 / (2 * sigma**2)), value)

    def disk(self, c, radius, value):
        d = np.hypot(self.xx - c[0], self.yy - c[1])
        self._over(np.clip(radius + 0.5 - d, 0.0, 1.0), value)


def render_figure(skeleton_seed: int, cfg: GenConfig) -> tuple[np.ndarray, KeypointSet]:
    """Draw one figure; returns a uint8 (size, size) image and its keypoints."""
    rng = np.random.default_rng(skeleton_seed)
    size = cfg.image_size
    unit = size / 64.0
    s = rng.uniform(9.0, 13.5) * unit
    tilt = rng.normal(0.0, 0.25)
    up = -np.pi / 2 + tilt
    pelvis = np.array([size / 2, size * 0.56]) + rng.normal(0.0, 4.0 * unit, 2)

    neck = pelvis + s * _unit(up)
    head_angle = up + rng.normal(0.0, 0.2)
    head = neck + 0.5 * s * _unit(head_angle)

    def arm(side):
        base = up + np.pi + side * rng.uniform(0.3, 2.4)
        elbow = neck + 0.7 * s * _unit(base)
        fore = base + side * rng.uniform(-1.6, 0.6)
        wrist = elbow + 0.6 * s * _unit(fore)
        return elbow, wrist, fore

    # "left" is image-left (negative x) for an upright figure
    l_elbow, l_wrist, l_fore = arm(1.0)
    r_elbow, r_wrist, r_fore = arm(-1.0)
    leg_dirs = [up + np.pi + rng.uniform(0.08, 0.5), up + np.pi - rng.uniform(0.08, 0.5)]
    l_ankle = pelvis + 1.5 * s * _unit(leg_dirs[0])
    r_ankle = pelvis + 1.5 * s * _unit(leg_dirs[1])

    body = [head, neck, pelvis, l_elbow, l_wrist, r_elbow, r_wrist, l_ankle, r_ankle]
    foot_len = 0.3 * s
    l_toe = l_ankle + foot_len * _unit(up - np.pi / 2 + rng.uniform(-0.3, 0.3))
    r_toe = r_ankle + foot_len * _unit(up + np.pi / 2 + rng.uniform(-0.3, 0.3))
    l_heel = l_ankle + 0.12 * s * _unit(up + np.pi / 2)
    r_heel = r_ankle + 0.12 * s * _unit(up - np.pi / 2)
    feet = [l_toe, r_toe, l_heel, r_heel][: cfg.num_foot]

    rot = head_angle + np.pi / 2
    c, sn = np.cos(rot), np.sin(rot)
    face = [head + s * np.array([c * dx - sn * dy, sn * dx + c * dy]) for _, dx, dy in FACE_POINTS[: cfg.num_face]]

    hand_len = 0.4 * s
    spread = np.linspace(-0.7, 0.7, cfg.num_per_hand) if cfg.num_per_hand > 1 else np.zeros(cfg.num_per_hand)
    hands = []
    for wrist, fore in ((l_wrist, l_fore), (r_wrist, r_fore)):
        jitter = rng.normal(0.0, 0.1, cfg.num_per_hand)
        lens = hand_len * rng.uniform(0.75, 1.0, cfg.num_per_hand)
        hands.append([wrist + ln * _unit(fore + a + j) for a, j, ln in zip(spread, jitter, lens)])

    cv = _Canvas(size)
    cv.img += 0.08
    hw = 0.9 * unit
    for a, b in ((pelvis, l_ankle), (pelvis, r_ankle), (neck, pelvis)):
        cv.line(a, b, hw, 0.85)
    for toe, heel, ankle in ((l_toe, l_heel, l_ankle), (r_toe, r_heel, r_ankle)):
        cv.line(heel, toe, 0.6 * unit, 0.6)
        cv.blob(toe, 0.7 * unit, 1.0)
    cv.disk(head, 0.3 * s, 0.45)
    cv.line(neck, head, hw, 0.85)
    for idx, (name, _, _) in enumerate(FACE_POINTS[: cfg.num_face]):
        cv.blob(face[idx], 0.6 * unit, 0.0 if "eye" in name or "brow" in name else 1.0)
    for elbow, wrist, tips in ((l_elbow, l_wrist, hands[0]), (r_elbow, r_wrist, hands[1])):
        cv.line(neck, elbow, hw, 0.85)
        cv.line(elbow, wrist, hw, 0.85)
        for j, tip in enumerate(tips):
            cv.line(wrist, tip, 0.35 * unit, 0.7)
            cv.blob(tip, 0.5 * unit, 0.55 + 0.45 * j / max(1, cfg.num_per_hand - 1))

    coords = np.array(body[: cfg.num_body] + feet + face + hands[0] + hands[1], dtype=np.float64)
    # pixel centers run 0..size-1, so the last SimCC bin stays inside
    inside = np.all((coords >= 0.0) & (coords <= size - 1), axis=1)
    vis = np.where(inside, 2, 0)

    if rng.random() < cfg.occlusion_rate:
        center = pelvis + rng.normal(0.0, s, 2)
        ang = rng.uniform(0, np.pi)
        half_len = rng.uniform(0.8, 1.6) * s
        a, b = center - half_len * _unit(ang), center + half_len * _unit(ang)
        half_w = rng.uniform(2.0, 3.5) * unit
        cv.line(a, b, half_w, 0.3)
        for k in range(len(coords)):
            if vis[k] == 2 and _point_seg_dist(coords[k], a, b) <= half_w + 0.5:
                vis[k] = 1

    if cfg.unlabeled_rate > 0:
        drop = rng.random(len(coords)) < cfg.unlabeled_rate
        vis = np.where(drop, 0, vis)

    if cfg.noise_std > 0:
        cv.img = cv.img + rng.normal(0.0, cfg.noise_std, cv.img.shape)
    image = np.round(np.clip(cv.img, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, groups = keypoint_table(cfg)
    return image, KeypointSet(coords, vis, tuple(groups))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def write_pgm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in image)
    path.write_text(f"P2\n{w} {h}\n255\n{rows}\n")


def read_pgm(path: Path) -> np.ndarray:
    tokens = path.read_text().split()
    if not tokens or tokens[0] != "P2":
        raise DatasetError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:], dtype=np.int64)
    if data.size != w * h or maxval != 255:
        raise DatasetError(f"{path}: bad PGM payload")
    return data.reshape(h, w).astype(np.uint8)


def split_ids(num_samples: int, seed: int) -> dict[str, list[int]]:
    """80/10/10 split by seeded shuffle; each split's ids kept sorted."""
    perm = np.random.default_rng([int(seed), 7, 7]).permutation(num_samples)
    n_train = int(num_samples * 0.8)
    n_val = int(num_samples * 0.1)
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    return {name: sorted(int(i) for i in p) for name, p in zip(SPLITS, parts)}


def generate_dataset(cfg: GenConfig, root: str | Path) -> tuple[Path, dict]:
    root = Path(root)
    names, groups = keypoint_table(cfg)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(cfg.num_samples):
            image, kps = render_figure(sample_seed(cfg.seed, i), cfg)
            fname = f"images/{i:06d}.pgm"
            write_pgm(root / fname, image)
            lines.append(
                json.dumps(
                    {
                        "id": i,
                        "image": fname,
                        "keypoints": [[float(x), float(y), int(v)] for (x, y), v in zip(kps.coords, kps.visibility)],
                        "groups": list(kps.part_group),
                    },
                    separators=(",", ":"),
                )
            )
        (root / "annotations.txt").write_text("\n".join(lines) + "\n")
        manifest = {
            "format_version": FORMAT_VERSION,
            "num_samples": cfg.num_samples,
            "num_keypoints": cfg.num_keypoints,
            "image_size": cfg.image_size,
            "keypoint_names": names,
            "part_groups": groups,
            "splits": split_ids(cfg.num_samples, cfg.seed),
            "gen_config": cfg.to_dict(),
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetError(f"writing dataset under {root}: {e}") from e
    logger.info("wrote %d samples to %s", cfg.num_samples, root)
    return root / "manifest.json", manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load_dataset(root: str | Path, split: str) -> Iterator[tuple[np.ndarray, KeypointSet]]:
    """Yield (uint8 image, keypoints) for ``split`` in manifest order."""
    root = Path(root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    manifest = read_manifest(root)
    wanted = manifest["splits"][split]
    records = _read_annotations(root)
    for sid in wanted:
        rec = records.get(sid)
        if rec is None:
            raise DatasetError(f"sample {sid}: missing from annotations.txt")
        try:
            image = read_pgm(root / rec["image"])
            kp = np.asarray(rec["keypoints"], dtype=np.float64)
            kps = KeypointSet(kp[:, :2], kp[:, 2].astype(np.int64), tuple(rec["groups"]))
        except (OSError, ValueError, KeyError, IndexError, DatasetError) as e:
            raise DatasetError(f"sample {sid}: {e}") from e
        yield image, kps


def _read_annotations(root: Path) -> dict[int, dict]:
    path = root / "annotations.txt"
    try:
        text = path.read_text()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as e:
            raise DatasetError(f"{path}:{lineno}: {e}") from e
        out[int(rec["id"])] = rec
    return out


class PoseDataset:
    """One split held in memory with SimCC targets pre-encoded.

    ``images`` is (M, 1, H, W) float32 in [0, 1]; ``targets`` and ``weights``
    come from :func:`posedistill.codec.encode`.
    """

    def __init__(self, images, keypoints, simcc, split_tag: str = ""):
        self.keypoints = list(keypoints)
        self.simcc = simcc
        self.split_tag = split_tag
        self.images = torch.from_numpy(np.stack(images).astype(np.float32) / 255.0).unsqueeze(1)
        enc = [encode(k, simcc) for k in self.keypoints]
        self.targets = SimCCTarget(
            torch.from_numpy(np.stack([t.x_labels for t, _ in enc]).astype(np.float32)),
            torch.from_numpy(np.stack([t.y_labels for t, _ in enc]).astype(np.float32)),
        )
        self.weights = torch.from_numpy(np.stack([w for _, w in enc]).astype(np.float32))

    def __len__(self) -> int:
        return len(self.keypoints)

    @classmethod
    def from_dir(cls, root: str | Path, split: str, simcc) -> "PoseDataset":
        manifest = read_manifest(root)
        pairs = list(load_dataset(root, split))
        if not pairs:
            raise DatasetError(f"{root}: split {split!r} is empty")
        tag = f"{manifest_digest(manifest)}:{split}"
        return cls([p[0] for p in pairs], [p[1] for p in pairs], simcc, tag)


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:12]
