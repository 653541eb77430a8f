"""On-disk artifact handling: manifests, images, heatmaps, reports, CSVs.

Formats
-------
manifest      JSON Lines; optional header object {"schema_version": 1},
              then one entry per line with sample_id, image_path, question,
              optional answer (list of token ids) and dataset_tag.
heatmap.raw   raw little-endian float32 buffer, row-major H x W (shape is
              recorded in the sample's report.json).
heatmap .npy  self-describing alternative accepted for external heatmaps.
report.json   deterministic (sorted keys, no timestamps) so identical runs
              produce byte-identical files; wall-clock data goes to
              timing.json instead.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from .exceptions import ConfigurationError, InvariantViolation, MissingHeatmap, ShapeMismatch
from .masking import upsample_mask
from .types import Image, Mask

SCHEMA_VERSION = 1


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image_path: str
    question: str
    answer: Optional[Tuple[int, ...]] = None
    dataset_tag: str = "default"

    def to_jsonable(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "image_path": self.image_path,
            "question": self.question,
            "dataset_tag": self.dataset_tag,
        }
        if self.answer is not None:
            d["answer"] = list(self.answer)
        return d


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InvariantViolation(f"duplicate sample ids: {dupes}")

    def tags(self) -> List[str]:
        return sorted({e.dataset_tag for e in self.entries})


def _parse_entry(obj: dict, base_dir: Path, line_no: int) -> ManifestEntry:
    try:
        sample_id = str(obj["sample_id"])
        image_path = str(obj["image_path"])
        question = str(obj["question"])
    except KeyError as exc:
        raise ConfigurationError(f"manifest line {line_no}: missing field {exc}") from None
    answer = obj.get("answer")
    if answer is not None:
        if isinstance(answer, str):
            raise ConfigurationError(
                f"manifest line {line_no}: answer must be a list of token ids "
                "(adapters supply token ids; no tokenizer is bundled)"
            )
        answer = tuple(int(t) for t in answer)
    resolved = image_path if os.path.isabs(image_path) else str(base_dir / image_path)
    return ManifestEntry(
        sample_id=sample_id,
        image_path=resolved,
        question=question,
        answer=answer,
        dataset_tag=str(obj.get("dataset_tag", "default")),
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and eagerly validate a JSONL manifest (image paths must exist)."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    entries: List[ManifestEntry] = []
    schema_version = SCHEMA_VERSION
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "sample_id" not in obj and "schema_version" in obj:
                schema_version = int(obj["schema_version"])
                continue
            entries.append(_parse_entry(obj, path.parent, line_no))
    manifest = DatasetManifest(entries=tuple(entries), schema_version=schema_version)
    for entry in manifest.entries:
        if not os.path.exists(entry.image_path):
            raise ConfigurationError(
                f"sample {entry.sample_id}: image not found at {entry.image_path}"
            )
    return manifest


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": manifest.schema_version}) + "\n")
        for entry in manifest.entries:
            fh.write(json.dumps(entry.to_jsonable(), sort_keys=True) + "\n")


# -- images -------------------------------------------------------------------


def load_image(path: str | Path) -> Image:
    """Load an image as float64 in [0, 1]: .npy verbatim, else via Pillow."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return Image(arr)
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


def save_image_npy(path: str | Path, image: Image) -> None:
    np.save(path, np.asarray(image.pixels))


# -- heatmaps -----------------------------------------------------------------


def save_heatmap_raw(path: str | Path, mask: Mask) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(mask.values, dtype="<f4").tobytes())


def load_heatmap_raw(path: str | Path, shape: Tuple[int, int]) -> Mask:
    data = np.fromfile(path, dtype="<f4")
    h, w = shape
    if data.size != h * w:
        raise ShapeMismatch(f"{path}: {data.size} floats, expected {h}x{w}")
    return Mask(np.clip(data.reshape(h, w).astype(np.float64), 0.0, 1.0))


def _normalize_to_unit(values: np.ndarray) -> np.ndarray:
    span = values.max() - values.min()
    if span == 0.0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def load_external_heatmap(path: str | Path, image_shape: Tuple[int, int]) -> Mask:
    """Load a heatmap from .npy or raw float32, upsampling to image
    resolution if needed; out-of-range external maps are min-max rescaled."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.asarray(np.load(path), dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatch(f"{path}: heatmap must be 2D, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            arr = _normalize_to_unit(arr)
        mask = Mask(arr)
    else:
        mask = load_heatmap_raw(path, image_shape)
    if mask.shape != tuple(image_shape):
        mask = upsample_mask(mask, image_shape)
    return mask


def resolve_heatmap(heatmap_dir: str | Path, sample_id: str, image_shape: Tuple[int, int]) -> Mask:
    """Find a sample's heatmap under a directory: explain-run layout
    (<id>/heatmap.raw with report.json) or flat <id>.npy / <id>.raw."""
    heatmap_dir = Path(heatmap_dir)
    run_raw = heatmap_dir / sample_id / "heatmap.raw"
    if run_raw.exists():
        report_path = heatmap_dir / sample_id / "report.json"
        shape = tuple(image_shape)
        if report_path.exists():
            with open(report_path, "r", encoding="utf-8") as fh:
                shape = tuple(json.load(fh)["heatmap_shape"])
        return load_heatmap_raw(run_raw, shape)
    for candidate in (heatmap_dir / f"{sample_id}.npy", heatmap_dir / f"{sample_id}.raw"):
        if candidate.exists():
            return load_external_heatmap(candidate, image_shape)
    raise MissingHeatmap(f"no heatmap for sample {sample_id} under {heatmap_dir}")


def render_overlay(image: Image, heatmap: Mask, alpha: float = 0.5) -> np.ndarray:
    """8-bit overlay: min-max normalized heatmap through the 'jet' colormap,
    alpha-blended onto the image."""
    import matplotlib

    cmap = matplotlib.colormaps["jet"]
    colored = cmap(_normalize_to_unit(heatmap.values))[:, :, :3]
    base = image.pixels
    if base.shape[2] == 1:
        base = np.repeat(base, 3, axis=2)
    elif base.shape[2] != 3:
        base = np.repeat(base.mean(axis=2, keepdims=True), 3, axis=2)
    blended = (1.0 - alpha) * base + alpha * colored
    return (np.clip(blended, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_overlay_png(path: str | Path, image: Image, heatmap: Mask, alpha: float = 0.5) -> None:
    PILImage.fromarray(render_overlay(image, heatmap, alpha)).save(path, format="PNG")


def save_token_plot(path: str | Path, report_jsonable: dict) -> None:
    """Bar plot of per-token probabilities under original vs baseline image."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p_orig = np.exp(report_jsonable["logp_original"])
    p_base = np.exp(report_jsonable["logp_baseline"])
    idx = np.arange(len(p_orig))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(idx)), 3))
    ax.bar(idx - 0.2, p_orig, width=0.4, label="original image")
    ax.bar(idx + 0.2, p_base, width=0.4, label="baseline image")
    for k in report_jsonable["selected_indices"]:
        ax.axvspan(k - 0.5, k + 0.5, color="red", alpha=0.12)
    ax.set_xlabel("token index")
    ax.set_ylabel("conditional probability")
    ax.set_ylim(0, 1)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- deterministic JSON / CSV -------------------------------------------------


def write_json(path: str | Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_evaluation_csv(path: str | Path, rows: Dict[str, Tuple[float, float, int]]) -> None:
    """Aggregate deletion/insertion AUC per dataset tag."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,deletion_auc,insertion_auc,n_samples\n")
        for tag in sorted(rows):
            del_auc, ins_auc, n = rows[tag]
            fh.write(f"{tag},{del_auc!r},{ins_auc!r},{n}\n")


def write_reliance_csv(path: str | Path, stats_list: Sequence) -> None:
    """Bucket percentages per dataset, one decimal (Table-2 shape)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,drop_lt_30_pct,drop_30_70_pct,drop_gt_70_pct,n_samples\n")
        for stats in stats_list:
            lo, mid, hi = stats.percentages
            fh.write(f"{stats.label},{lo:.1f},{mid:.1f},{hi:.1f},{len(stats.drops)}\n")


def write_sweep_csv(
    path: str | Path,
    param_name: str,
    rows: Dict[float, Dict[str, Tuple[float, float]]],
    tags: Sequence[str],
) -> None:
    """One row per swept value, Del/Ins columns per dataset tag."""
    tags = sorted(tags)
    with open(path, "w", encoding="utf-8") as fh:
        header = [param_name]
        for tag in tags:
            header += [f"{tag}_del", f"{tag}_ins"]
        fh.write(",".join(header) + "\n")
        for value in rows:
            cells = [repr(float(value))]
            for tag in tags:
                if tag in rows[value]:
                    d, i = rows[value][tag]
                    cells += [repr(float(d)), repr(float(i))]
                else:
                    cells += ["", ""]
            fh.write(",".join(cells) + "\n")
