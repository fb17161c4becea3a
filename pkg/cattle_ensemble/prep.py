"""Run the image preprocessing pipeline over a dataset manifest.

Real images are resized to 224x224, shuffled with a seeded
Fisher-Yates permutation and augmented; externally supplied synthetic
images are resized and joined to them; everything is then normalized
to [0, 1].  Each output image is written as PNG plus a raw float32
tensor, and the manifest is rewritten with the new digests.

Every image draws from its own PRNG substream (seed, sample id), so the
output bytes do not depend on the order or the number of workers.
"""

import hashlib
import logging
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Optional

from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from .imaging import (
    PSNR_THRESHOLD_DB,
    ImageError,
    augment,
    canny_edge_density,
    normalize,
    psnr_gate,
    read_image,
    resize_bilinear,
    write_png,
    write_tensor,
)
from .manifest import DatasetManifest
from .prng import Xoshiro256, shuffle_with
from .pydantic_models import AugmentSpec, FailedImage, PrepReport, SampleRecord

LOGGER = logging.getLogger("cattle-ensemble")

TARGET_SIZE = 224
EDGE_DENSITY_FLOOR = 0.01


@dataclass(frozen=True)
class PrepSettings:
    """Everything a worker needs besides the record itself."""

    image_root: Path
    out_dir: Path
    spec: AugmentSpec
    seed: int
    size: int = TARGET_SIZE
    edge_density_floor: float = EDGE_DENSITY_FLOOR
    psnr_threshold: float = PSNR_THRESHOLD_DB
    jpeg_quality: int = 90


@dataclass(frozen=True)
class PrepResult:
    sample: SampleRecord
    ok: bool
    reason: str = ""
    low_edge_density: bool = False
    low_psnr: bool = False


def image_seed(seed: int, sample_id: str) -> int:
    """Seed of the augmentation substream for one sample."""
    return Xoshiro256.substream(seed, f"augment/{sample_id}").next_u64()


def prep_one(sample: SampleRecord, settings: PrepSettings, do_augment: bool) -> PrepResult:
    """Process a single image; failures are returned, not raised."""
    try:
        img = read_image(settings.image_root / sample.path)
    except (ImageError, OSError) as err:
        LOGGER.warning("Skipping %s: %s", sample.id, err)
        return PrepResult(sample, False, str(err))
    img = resize_bilinear(img, settings.size, settings.size)
    passed, value = psnr_gate(img, settings.jpeg_quality, settings.psnr_threshold)
    if not passed:
        LOGGER.warning("Image %s fails the PSNR gate (%.2f dB)", sample.id, value)
    density = canny_edge_density(img)
    low_density = density < settings.edge_density_floor
    if low_density:
        LOGGER.warning("Image %s has low edge density %.4f, flagged for review", sample.id, density)
    if do_augment:
        img = augment(img, settings.spec, image_seed(settings.seed, sample.id))
    png_rel = Path("images") / f"{sample.id}.png"
    png_bytes = write_png(img, settings.out_dir / png_rel)
    write_tensor(normalize(img), settings.out_dir / png_rel.with_suffix(".hf01"))
    updated = sample.model_copy(
        update={"path": str(png_rel), "sha256": hashlib.sha256(png_bytes).hexdigest()}
    )
    return PrepResult(updated, True, low_edge_density=low_density, low_psnr=not passed)


def _prep_real(sample, settings):
    return prep_one(sample, settings, True)


def _prep_synthetic(sample, settings):
    return prep_one(sample, settings, False)


def _run(func, samples, settings, workers):
    if workers > 1 and len(samples) > 1:
        return process_map(
            func, samples, [settings] * len(samples), max_workers=workers, chunksize=8
        )
    return [func(sample, settings) for sample in tqdm(samples)]


def run_prep_pipeline(
    manifest: DatasetManifest,
    spec: AugmentSpec,
    seed: int,
    out_dir: PathLike,
    image_root: Optional[PathLike] = None,
    workers: int = 1,
    size: int = TARGET_SIZE,
    edge_density_floor: float = EDGE_DENSITY_FLOOR,
) -> tuple[DatasetManifest, PrepReport]:
    """Preprocess every image of ``manifest`` into ``out_dir``."""
    out_dir = Path(out_dir)
    settings = PrepSettings(
        image_root=Path(image_root) if image_root is not None else Path.cwd(),
        out_dir=out_dir,
        spec=spec,
        seed=seed,
        size=size,
        edge_density_floor=edge_density_floor,
    )
    real = [s for s in manifest.samples if not s.synthetic]
    synthetic = [s for s in manifest.samples if s.synthetic]
    LOGGER.info("Shuffling %d real images...", len(real))
    real = shuffle_with(real, Xoshiro256.substream(seed, "shuffle"))
    LOGGER.info("Resizing and augmenting %d real images...", len(real))
    results = _run(_prep_real, real, settings, workers)
    LOGGER.info("Resizing %d synthetic images...", len(synthetic))
    results += _run(_prep_synthetic, synthetic, settings, workers)

    report = PrepReport(seed=seed)
    kept = []
    for result in results:
        if not result.ok:
            report.failed.append(FailedImage(id=result.sample.id, reason=result.reason))
            continue
        kept.append(result.sample)
        if result.low_edge_density:
            report.flagged_low_edge_density.append(result.sample.id)
        if result.low_psnr:
            report.flagged_low_psnr.append(result.sample.id)
    report.processed = len(kept)
    LOGGER.info("Processed %d images, %d failed", report.processed, len(report.failed))
    return DatasetManifest(kept), report
