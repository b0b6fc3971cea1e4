"""Identity-grouped data and per-sample condition resolution.

Each training sample uses one of three identity conditions: its own face
("paired"), the null identity ("dropped"), or another photo of the same
person ("shuffled"). The shuffle probability ramps linearly over training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .config import CurriculumSchedule

BACKGROUNDS = np.array(
    [[0.15, 0.2, 0.45], [0.8, 0.8, 0.78], [0.25, 0.5, 0.25], [0.7, 0.55, 0.2]]
)
CAPTIONS = ["", "a face on a blue background", "a face on a grey background",
            "a face on a green background", "a face on an ochre background"]


@dataclass(frozen=True)
class Record:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    face_mask: np.ndarray  # (H, W) uint8
    identity_id: int
    caption_id: int


@dataclass
class IdentityDataset:
    records: list
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            for i, r in enumerate(self.records):
                self.index.setdefault(r.identity_id, []).append(i)
        self.index = {k: list(v) for k, v in sorted(self.index.items())}

    def __len__(self):
        return len(self.records)

    @property
    def images(self):
        return np.stack([r.image for r in self.records])

    @property
    def masks(self):
        return np.stack([r.face_mask for r in self.records])

    @property
    def identity_ids(self):
        return np.array([r.identity_id for r in self.records])

    @property
    def caption_ids(self):
        return np.array([r.caption_id for r in self.records])

    def save(self, directory) -> None:
        from .encoder import save_png

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, r in enumerate(self.records):
            img, mask = f"image_{i:04d}.png", f"mask_{i:04d}.png"
            save_png(directory / img, r.image)
            save_png(directory / mask, r.face_mask.astype(np.float64))
            entries.append({"image": img, "mask": mask, "identity_id": r.identity_id,
                            "caption_id": r.caption_id})
        (directory / "manifest.json").write_text(json.dumps({"records": entries}, indent=1))

    @classmethod
    def load(cls, directory) -> "IdentityDataset":
        from .encoder import load_image

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        records = []
        for e in manifest["records"]:
            image = load_image(directory / e["image"]).astype(np.float32)
            mask = (load_image(directory / e["mask"])[..., 0] > 0.5).astype(np.uint8)
            records.append(Record(image, mask, e["identity_id"], e["caption_id"]))
        return cls(records)


def _identity_params(rng):
    return {
        "skin": rng.uniform(0.3, 0.95, 3),
        "radii": rng.uniform([11, 14], [17, 21]),
        "eye_dx": rng.uniform(4, 8),
        "eye_dy": rng.uniform(-7, -2),
        "eye_r": rng.uniform(1.5, 3.0),
        "eye_color": rng.uniform(0.0, 0.5, 3),
        "mouth_w": rng.uniform(3, 9),
        "mouth_dy": rng.uniform(4, 9),
        "mouth_color": rng.uniform(0.2, 0.9, 3),
    }


def render_face(params, size, center, background, lighting):
    """Draw a blob face on a flat background; returns (image, mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = center
    ry, rx = params["radii"][1], params["radii"][0]
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img = np.broadcast_to(background, (size, size, 3)).copy()
    img[mask] = params["skin"] * lighting
    for side in (-1, 1):
        ex, ey = cx + side * params["eye_dx"], cy + params["eye_dy"]
        eye = (xx - ex) ** 2 + (yy - ey) ** 2 <= params["eye_r"] ** 2
        img[eye & mask] = params["eye_color"] * lighting
    mouth = (np.abs(xx - cx) <= params["mouth_w"]) & (np.abs(yy - cy - params["mouth_dy"]) <= 1.0)
    img[mouth & mask] = params["mouth_color"] * lighting
    return np.clip(img, 0, 1).astype(np.float32), mask.astype(np.uint8)


def generate_synthetic_identity_dataset(n_identities=10, n_per_identity=10, image_size=64,
                                        rng=None) -> IdentityDataset:
    """Render ``n_identities`` blob faces, each under ``n_per_identity`` nuisance draws."""
    if n_identities < 2 or n_per_identity < 2:
        raise ValueError("need at least 2 identities with 2 records each")
    rng = np.random.default_rng(rng)
    identities = [_identity_params(rng) for _ in range(n_identities)]
    jitter = image_size / 16
    records = []
    for ident, params in enumerate(identities):
        for _ in range(n_per_identity):
            center = image_size / 2 + rng.uniform(-jitter, jitter, 2)
            bg = int(rng.integers(len(BACKGROUNDS)))
            lighting = rng.uniform(0.8, 1.2)
            image, mask = render_face(params, image_size, center, BACKGROUNDS[bg], lighting)
            records.append(Record(image, mask, ident, bg + 1))
    return IdentityDataset(records)


def schedule_shuffle_prob(step, sched: CurriculumSchedule) -> float:
    if sched.total_steps <= 0:
        return sched.shuffle_end
    frac = min(max(step / sched.total_steps, 0.0), 1.0)
    p = sched.shuffle_start + (sched.shuffle_end - sched.shuffle_start) * frac
    return float(min(max(p, sched.shuffle_start), sched.shuffle_end))


class Case(str, Enum):
    PAIRED = "paired"
    DROPPED = "dropped"
    SHUFFLED = "shuffled"


@dataclass(frozen=True)
class ConditionPlan:
    case: Case
    source_record: int | None


def sample_condition(record: int, step: int, sched: CurriculumSchedule, rng,
                     dataset: IdentityDataset) -> ConditionPlan:
    """Resolve drop first, then same-identity shuffle, else paired."""
    if rng.random() < sched.drop_prob:
        return ConditionPlan(Case.DROPPED, None)
    if rng.random() < schedule_shuffle_prob(step, sched):
        peers = [i for i in dataset.index[dataset.records[record].identity_id] if i != record]
        if peers:
            return ConditionPlan(Case.SHUFFLED, int(peers[rng.integers(len(peers))]))
    return ConditionPlan(Case.PAIRED, record)


def sample_text_drop(sched: CurriculumSchedule, rng) -> bool:
    return bool(rng.random() < sched.text_drop_prob)


def null_identity_embedding(model):
    """The shared null-identity tokens used for dropped samples and the CFG null branch."""
    return model.null_identity_embedding()
