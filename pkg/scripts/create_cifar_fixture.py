#!/usr/bin/env python3
"""Generate a small CIFAR-10-format directory for local pipeline testing."""

from __future__ import annotations

from pathlib import Path
import sys

import click
import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.datasets import (  # noqa: E402
    CIFAR10_TEST_FILE,
    CIFAR10_TRAIN_FILES,
    render_synthetic,
    write_cifar_batch,
)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.round(images * 48.0 + 128.0), 0, 255).astype(np.uint8)


@click.command()
@click.option(
    "--out",
    "out_dir",
    type=click.Path(path_type=Path),
    default=ROOT / "data" / "fixtures" / "cifar10",
    show_default=True,
)
@click.option("--records", type=click.IntRange(min=10), default=200, show_default=True, help="Records per batch file.")
@click.option("--noise", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def main(out_dir: Path, records: int, noise: float, seed: int) -> None:
    """Write data_batch_1..5 and test_batch with synthetic 32x32 images."""
    rng = np.random.default_rng(seed)
    for name in CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,):
        labels = np.arange(records) % 10
        rng.shuffle(labels)
        images = render_synthetic(labels, rng, num_classes=10, image_size=32, noise=noise)
        write_cifar_batch(out_dir / name, _to_bytes(images), labels.tolist())
    click.echo(f"Fixture written to {out_dir} ({records} records per file)")
    click.echo(f"Use: --set dataset=cifar10 --set data_path={out_dir} --set records_per_file={records}")


if __name__ == "__main__":
    main()
