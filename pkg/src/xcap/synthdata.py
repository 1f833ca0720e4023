"""Synthetic stand-in for a corpus of classifier feature maps.

Each fracture plants a label-dependent signal in a 2x2 block of the 8x8
region grid; the block position encodes the fracture location and the
planted direction vectors encode displacement and character. Everything
else is Gaussian noise.

On-disk layout of a dataset directory::

    manifest.json   records (id, split, labels, tokens, feature_index) + config
    vocab.txt       one token per line, id = line number
    features.f32    little-endian float32, record i at byte i * 64 * 412 * 4
"""
from __future__ import annotations

import functools
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grammar import (
    DISPLACEMENTS,
    NO_FRACTURE,
    CaseDescription,
    FractureLabels,
    Vocabulary,
    build_vocab,
    case_from_dict,
    case_to_dict,
    fracture_cases,
    render,
)
from .tensor import RngStream

GRID = 8
REGIONS = GRID * GRID
FEATURE_DIM = 412
SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1

# top-left (row, col) of each location's 2x2 block
LOCATION_BLOCKS = {
    "subcapital": (1, 1),
    "transcervical": (1, 5),
    "basicervical": (5, 1),
}
CHARACTER_FLAGS = ("comminuted", "impacted", "avulsed_fragment")
_DIRECTION_SEED = 412


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    train: int = 2000
    val: int = 200
    test: int = 200
    fracture_rate: float = 0.5
    noise_sigma: float = 0.1
    signal_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for split in SPLITS:
            if getattr(self, split) < 0:
                raise ValueError(f"{split} count must be >= 0")
        if not 0.0 <= self.fracture_rate <= 1.0:
            raise ValueError("fracture_rate must lie in [0, 1]")
        if self.noise_sigma < 0 or self.signal_strength < 0:
            raise ValueError("noise_sigma and signal_strength must be >= 0")


@dataclass
class DatasetRecord:
    id: str
    split: str
    case: CaseDescription
    tokens: list[int]
    feature_index: int
    features: np.ndarray | None = field(default=None, repr=False)


def block_cells(location: str, dilate: int = 0) -> list[int]:
    """Row-major region indices of a location block, optionally grown by ``dilate`` cells."""
    r0, c0 = LOCATION_BLOCKS[location]
    rows = range(max(r0 - dilate, 0), min(r0 + 2 + dilate, GRID))
    cols = range(max(c0 - dilate, 0), min(c0 + 2 + dilate, GRID))
    return [r * GRID + c for r in rows for c in cols]


@functools.lru_cache(maxsize=None)
def planted_directions() -> dict[str, np.ndarray]:
    """Seven fixed orthonormal directions: one per displacement degree, one per character flag."""
    names = (*DISPLACEMENTS, *CHARACTER_FLAGS)
    gauss = RngStream(_DIRECTION_SEED, "directions").normal((FEATURE_DIM, len(names)))
    q, _ = np.linalg.qr(gauss)
    gram = q.T @ q
    if np.abs(gram - np.eye(len(names))).max() > 1e-10:
        raise AssertionError("planted directions are not orthonormal")
    return {name: q[:, i].copy() for i, name in enumerate(names)}


def signal_vector(case: FractureLabels) -> np.ndarray:
    dirs = planted_directions()
    v = dirs[case.displacement].copy()
    for flag in CHARACTER_FLAGS:
        if getattr(case, flag):
            v += dirs[flag]
    return v


def generate_record(case: CaseDescription, seed: int, noise_sigma: float = 0.1,
                    signal_strength: float = 1.0) -> tuple[np.ndarray, list[str]]:
    """Feature map (64 x 412, float32) and rendered sentence for one case."""
    features = RngStream(seed, "features").normal((REGIONS, FEATURE_DIM), noise_sigma)
    if case is not NO_FRACTURE:
        features[block_cells(case.location)] += signal_strength * signal_vector(case)
    return features.astype(np.float32), render(case)


def record_seed(seed: int, record_id: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{record_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def draw_case(seed: int, record_id: str, fracture_rate: float) -> CaseDescription:
    rng = RngStream(seed, "case", record_id)
    if rng.uniform(()) < fracture_rate:
        return fracture_cases()[int(rng.integers(0, 96))]
    return NO_FRACTURE


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Write a dataset directory and return a summary of what was written."""
    out = Path(out_dir)
    vocab = build_vocab()
    records = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "features.f32", "wb") as blob:
            index = 0
            for split in SPLITS:
                for j in range(getattr(cfg, split)):
                    rid = f"{split}-{j:05d}"
                    case = draw_case(cfg.seed, rid, cfg.fracture_rate)
                    features, words = generate_record(
                        case, record_seed(cfg.seed, rid), cfg.noise_sigma, cfg.signal_strength)
                    blob.write(features.astype("<f4").tobytes())
                    records.append({
                        "id": rid,
                        "split": split,
                        "labels": case_to_dict(case),
                        "tokens": vocab.encode(words),
                        "feature_index": index,
                    })
                    index += 1
        manifest = {
            "format_version": FORMAT_VERSION,
            "feature_shape": [REGIONS, FEATURE_DIM],
            "config": asdict(cfg),
            "vocab_size": len(vocab),
            "records": records,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        vocab.save(out / "vocab.txt")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out}: {exc}") from exc
    summary = {"records": len(records), "out": str(out)}
    for split in SPLITS:
        in_split = [r for r in records if r["split"] == split]
        summary[split] = len(in_split)
        summary[f"{split}_fractures"] = sum(r["labels"] is not None for r in in_split)
    return summary


def _read_manifest(root: Path) -> dict:
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest.json in {root}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest in {root}: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("records"), list):
        raise DatasetError(f"corrupt manifest in {root}: missing record list")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format_version')!r}")
    return manifest


def load_vocab(data_dir: str | Path) -> Vocabulary:
    path = Path(data_dir) / "vocab.txt"
    if not path.exists():
        raise DatasetError(f"no vocab.txt in {data_dir}")
    return Vocabulary.load(path)


def load_dataset(data_dir: str | Path, split: str, with_features: bool = True) -> list[DatasetRecord]:
    """Records of one split, in manifest order, with their feature maps attached."""
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {', '.join(SPLITS)}")
    root = Path(data_dir)
    manifest = _read_manifest(root)
    shape = tuple(manifest.get("feature_shape", ()))
    if len(shape) != 2:
        raise DatasetError("corrupt manifest: bad feature_shape")
    block = shape[0] * shape[1]

    parsed: list[DatasetRecord] = []
    for raw in manifest["records"]:
        rid = raw.get("id", "?") if isinstance(raw, dict) else "?"
        try:
            record = DatasetRecord(
                id=str(raw["id"]),
                split=str(raw["split"]),
                case=case_from_dict(raw["labels"]),
                tokens=[int(t) for t in raw["tokens"]],
                feature_index=int(raw["feature_index"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"corrupt manifest entry for record {rid!r}: {exc}") from exc
        parsed.append(record)

    blob_path = root / "features.f32"
    available = os.path.getsize(blob_path) // 4 if blob_path.exists() else 0
    for record in sorted(parsed, key=lambda r: r.feature_index):
        if (record.feature_index + 1) * block > available:
            raise DatasetError(
                f"features.f32 too short: record {record.id!r} (index {record.feature_index}) "
                f"needs {(record.feature_index + 1) * block * 4} bytes, file has {available * 4}")

    selected = [r for r in parsed if r.split == split]
    if with_features and selected:
        blob = np.memmap(blob_path, dtype="<f4", mode="r", shape=(available // block, *shape))
        for r in selected:
            r.features = np.array(blob[r.feature_index], dtype=np.float32)
        del blob
    return selected
