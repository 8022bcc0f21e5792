# Licensed under the MIT License.
"""Reading and writing arrays, datasets, checkpoints, result tables and run manifests."""

import csv
import json
import logging
import platform
import zipfile
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from . import __version__
from .array_model import ArrayParams
from .errors import ConfigError
from .signal_sim import DatasetBundle, Scene, SimConfig
from .utils import COMPLEX_DTYPE, REAL_DTYPE

logger = logging.getLogger(__name__)

ARRAY_FORMAT = "arraycal-array/1"
DATASET_FORMAT = "arraycal-dataset/1"
CHECKPOINT_MAGIC = "arraycal-checkpoint/1"
MANIFEST_FILENAME = "manifest.json"

# Fixed member timestamp so that identical datasets give identical bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

StrPath = str | Path


def _parse_float(value: Any) -> float:
    """Accept both hex-float strings and plain numbers."""
    if isinstance(value, str) and "0x" in value.lower():
        return float.fromhex(value)
    return float(value)


def array_to_dict(params: ArrayParams) -> dict:
    gains = params.gains.tolist()
    positions = params.positions.tolist()
    return {
        "format": ARRAY_FORMAT,
        "wavelength": float(params.wavelength).hex(),
        "direction": params.direction,
        "antennas": [
            {"re_gain": g.real.hex(), "im_gain": g.imag.hex(), "position": p.hex()}
            for g, p in zip(gains, positions)
        ],
    }


def array_from_dict(data: Mapping) -> ArrayParams:
    if data.get("format") != ARRAY_FORMAT:
        raise ConfigError(f"expected array format {ARRAY_FORMAT!r}, got {data.get('format')!r}")
    antennas = data["antennas"]
    re = [_parse_float(a["re_gain"]) for a in antennas]
    im = [_parse_float(a["im_gain"]) for a in antennas]
    return ArrayParams(
        gains=torch.complex(torch.tensor(re, dtype=REAL_DTYPE), torch.tensor(im, dtype=REAL_DTYPE)),
        positions=torch.tensor([_parse_float(a["position"]) for a in antennas], dtype=REAL_DTYPE),
        wavelength=_parse_float(data["wavelength"]),
        direction=data.get("direction", "sin"),
    )


def array_to_yaml(params: ArrayParams) -> str:
    return yaml.safe_dump(array_to_dict(params), sort_keys=False)


def array_from_yaml(text: str) -> ArrayParams:
    return array_from_dict(yaml.safe_load(text))


def write_array(path: StrPath, params: ArrayParams) -> None:
    Path(path).write_text(array_to_yaml(params))


def read_array(path: StrPath) -> ArrayParams:
    return array_from_yaml(Path(path).read_text())


def _write_npz(path: Path, arrays: Mapping[str, np.ndarray]) -> None:
    # np.savez stamps members with the current time; write the archive by hand instead.
    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for key, value in arrays.items():
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_EPOCH)
            with zf.open(info, mode="w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asanyarray(value), allow_pickle=False)


def write_dataset(path: StrPath, bundle: DatasetBundle) -> None:
    """Write scenes sharing one source count to an .npz file.

    Keys: format, config (JSON), array (YAML of the physical array), thetas [S, M] float64,
    snapshots [S, N, T] complex128.
    """
    scenes = bundle.scenes
    assert scenes, "cannot write an empty dataset"
    assert len({s.n_sources for s in scenes}) == 1, "all scenes must have the same source count"
    _write_npz(
        Path(path),
        {
            "format": np.array(DATASET_FORMAT),
            "config": np.array(json.dumps(bundle.config.to_dict(), sort_keys=True)),
            "array": np.array(array_to_yaml(bundle.physical)),
            "thetas": torch.stack([s.thetas for s in scenes]).numpy(),
            "snapshots": torch.stack([s.snapshots for s in scenes]).numpy(),
        },
    )
    logger.info(f"Wrote {len(scenes)} scenes to {path}")


def read_dataset(path: StrPath) -> DatasetBundle:
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data or str(data["format"]) != DATASET_FORMAT:
            raise ConfigError(f"{path} is not an {DATASET_FORMAT} file")
        config = SimConfig(**json.loads(str(data["config"])))
        physical = array_from_yaml(str(data["array"]))
        thetas = torch.from_numpy(data["thetas"]).to(REAL_DTYPE)
        snapshots = torch.from_numpy(data["snapshots"]).to(COMPLEX_DTYPE)
    scenes = [Scene(thetas=t, snapshots=x) for t, x in zip(thetas, snapshots)]
    return DatasetBundle(config=config, physical=physical, scenes=scenes)


def write_checkpoint(path: StrPath, params: ArrayParams, epoch: int, config: Mapping) -> None:
    document = {
        "magic": CHECKPOINT_MAGIC,
        "epoch": int(epoch),
        "config": dict(config),
        "array": array_to_dict(params),
    }
    Path(path).write_text(yaml.safe_dump(document, sort_keys=False))


def read_checkpoint(path: StrPath) -> tuple[ArrayParams, int, dict]:
    """Returns (array, epoch, config echo)."""
    document = yaml.safe_load(Path(path).read_text())
    if not isinstance(document, dict) or document.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not an {CHECKPOINT_MAGIC} checkpoint")
    return array_from_dict(document["array"]), int(document["epoch"]), document["config"]


def read_any_array(path: StrPath) -> ArrayParams:
    """Load an array from either an array file or a checkpoint."""
    document = yaml.safe_load(Path(path).read_text())
    if isinstance(document, dict) and document.get("magic") == CHECKPOINT_MAGIC:
        return array_from_dict(document["array"])
    return array_from_dict(document)


def write_csv(path: StrPath, fieldnames: list[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path: StrPath) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_manifest(output_dir: StrPath, command: str, config: Mapping, seed: int) -> Path:
    """Write manifest.json with everything needed to rerun `command`."""
    manifest = {
        "command": command,
        "seed": int(seed),
        "config": dict(config),
        "versions": {
            "arraycal": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    path = Path(output_dir) / MANIFEST_FILENAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
