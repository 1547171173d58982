"""
On-disk formats.

A persisted pipeline is a directory holding ``pipeline.yaml`` (the manifest)
and one ``net_k{k}_n{n}.npz`` per trained network. The manifest records the
format version, the time grid, the normalization grid, the training config,
the per-window normalizer masses and, for every network, its file name,
sha256 checksum and training history. Weights are stored as float64 arrays
``weights_<layer>``, ``biases_<layer>``, ``input_shift``, ``input_scale`` and
``shape = [input_dim, width, depth, state_dim]``.

Observation sequences and grid densities are CSV files written with
``%.17g`` so that a parse reproduces the values exactly.
"""

import hashlib
import logging
import os
import zipfile
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

import ebdsfilter
from ebdsfilter.ebds import FilterPipeline, TrainConfig
from ebdsfilter.exception import InvalidParams, PersistenceError, StorageError
from ebdsfilter.grid import Grid1D, TimeIndex
from ebdsfilter.model import ModelBundle, get_builtin
from ebdsfilter.network import EnergyNetwork
from ebdsfilter.simulate import ObservationSequence, TimeGrid

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "pipeline.yaml"
FLOAT_FORMAT = "%.17g"


def network_filename(index: TimeIndex) -> str:
    return f"net_k{index[0]}_n{index[1]}.npz"


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fileobj:
        for block in iter(lambda: fileobj.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def save_network(net: EnergyNetwork, path: str) -> str:
    arrays = {
        "shape": np.array([net.input_dim, net.width, net.depth, net.state_dim]),
        "input_shift": net.input_shift,
        "input_scale": net.input_scale,
    }
    for layer, (weight, bias) in enumerate(zip(net.weights, net.biases)):
        arrays[f"weights_{layer}"] = weight
        arrays[f"biases_{layer}"] = bias
    with open(path, "wb") as fileobj:
        np.savez(fileobj, **arrays)
    return _sha256(path)


def load_network(
    path: str, index: Optional[TimeIndex] = None, checksum: Optional[str] = None
) -> EnergyNetwork:
    payload = {"file": path, "index": list(index) if index else None}
    if not os.path.exists(path):
        raise PersistenceError(f"missing weight file {path}", payload)
    if checksum is not None and _sha256(path) != checksum:
        raise PersistenceError(f"checksum mismatch for weight file {path}", payload)
    try:
        with np.load(path, allow_pickle=False) as data:
            input_dim, width, depth, state_dim = (int(v) for v in data["shape"])
            weights = [data[f"weights_{layer}"] for layer in range(depth + 1)]
            biases = [data[f"biases_{layer}"] for layer in range(depth + 1)]
            shift, scale = data["input_shift"], data["input_scale"]
    except (KeyError, ValueError, OSError, zipfile.BadZipFile) as exc:
        raise PersistenceError(f"corrupted weight file {path}: {exc}", payload) from exc
    return EnergyNetwork(
        input_dim=input_dim,
        width=width,
        depth=depth,
        weights=weights,
        biases=biases,
        input_shift=shift,
        input_scale=scale,
        state_dim=state_dim,
    )


def _network_entry(directory: str, index: TimeIndex, net: EnergyNetwork) -> dict:
    name = network_filename(index)
    return {
        "k": index[0],
        "n": index[1],
        "file": name,
        "sha256": save_network(net, os.path.join(directory, name)),
        "history": {key: float(value) for key, value in net.history.items()},
    }


def pipeline_manifest(pipeline: FilterPipeline, entries: List[dict]) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "ebdsfilter_version": ebdsfilter.__version__,
        "model": pipeline.model_name,
        "time": pipeline.time.to_dict(),
        "norm_grid": pipeline.norm_grid.to_dict() if pipeline.norm_grid else None,
        "seed": pipeline.seed,
        "train": _plain(pipeline.config.dict()),
        "normalizers": {int(k): dict(v) for k, v in pipeline.normalizers.items()},
        "networks": sorted(entries, key=lambda e: (e["k"], e["n"])),
    }


class PipelineWriter:
    """Incremental persistence; usable as the train_pipeline callback."""

    def __init__(self, directory: str):
        self.directory = directory
        self.entries: Dict[TimeIndex, dict] = {}
        os.makedirs(directory, exist_ok=True)

    def __call__(self, pipeline: FilterPipeline, index: TimeIndex):
        net = pipeline.networks[index]
        self.entries[index] = _network_entry(self.directory, index, net)
        self.write_manifest(pipeline)

    def write_manifest(self, pipeline: FilterPipeline):
        manifest = pipeline_manifest(pipeline, list(self.entries.values()))
        path = os.path.join(self.directory, MANIFEST_NAME)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fileobj:
            yaml.safe_dump(manifest, fileobj, sort_keys=False)
        os.replace(tmp, path)


def save_pipeline(pipeline: FilterPipeline, directory: str) -> str:
    writer = PipelineWriter(directory)
    for index, net in sorted(pipeline.networks.items()):
        writer.entries[index] = _network_entry(directory, index, net)
    writer.write_manifest(pipeline)
    logger.info(
        "pipeline saved",
        extra={"directory": directory, "networks": len(writer.entries)},
    )
    return os.path.join(directory, MANIFEST_NAME)


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fileobj:
            manifest = yaml.safe_load(fileobj)
    except FileNotFoundError as exc:
        raise PersistenceError(
            f"no pipeline manifest in {directory}", {"file": path}
        ) from exc
    except yaml.YAMLError as exc:
        raise PersistenceError(
            f"unreadable pipeline manifest {path}", {"file": path}
        ) from exc
    version = manifest.get("format_version") if isinstance(manifest, dict) else None
    if version != FORMAT_VERSION:
        raise PersistenceError(
            "unsupported pipeline format",
            {"file": path, "expected": FORMAT_VERSION},
        )
    return manifest


def load_networks(
    directory: str, manifest: Optional[dict] = None
) -> Dict[TimeIndex, EnergyNetwork]:
    manifest = manifest or read_manifest(directory)
    networks = {}
    for entry in manifest.get("networks", []):
        index = (int(entry["k"]), int(entry["n"]))
        path = os.path.join(directory, entry["file"])
        net = load_network(path, index, entry.get("sha256"))
        net.history = dict(entry.get("history") or {})
        networks[index] = net
    return networks


def load_pipeline(
    directory: str, bundle: Optional[ModelBundle] = None
) -> FilterPipeline:
    """
    Rebuild a pipeline from disk. Built-in models are looked up by the
    manifest's model name; custom models must be passed as ``bundle``.
    """
    manifest = read_manifest(directory)
    cfg = TrainConfig.parse_obj(manifest["train"])
    if bundle is None:
        bundle = get_builtin(manifest["model"], cfg.training_init)
    model, obs, init = bundle
    norm_grid = manifest.get("norm_grid")
    pipeline = FilterPipeline(
        model=model,
        obs=obs,
        init=init,
        time=TimeGrid(**manifest["time"]),
        config=cfg,
        norm_grid=Grid1D(**norm_grid) if norm_grid else None,
        networks=load_networks(directory, manifest),
        normalizers={int(k): v for k, v in (manifest.get("normalizers") or {}).items()},
        model_name=manifest["model"],
        seed=int(manifest["seed"]),
    )
    return pipeline


def _plain(value):
    """Manifest-safe copy: tuples to lists, enums to their values."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.generic):
        return value.item()
    return value


# CSV codecs


def observation_frame(
    seq: ObservationSequence, time: Optional[TimeGrid] = None
) -> pd.DataFrame:
    frame = pd.DataFrame({"k": np.arange(seq.K + 1)})
    if time is not None:
        frame["t"] = [time.t(k, 0) for k in range(seq.K + 1)]
    for dim in range(seq.d_prime):
        frame[f"y{dim}"] = seq.values[dim]
    return frame


def write_observations(
    sequences: Sequence[ObservationSequence],
    directory: str,
    time: Optional[TimeGrid] = None,
) -> List[str]:
    if not sequences:
        raise InvalidParams("no observation sequences to write")
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        path = os.path.join(directory, f"obs_{i:04d}.csv")
        frame = observation_frame(seq, time)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        paths.append(path)
    return paths


def read_observations(path: str) -> ObservationSequence:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as exc:
        raise StorageError(
            f"cannot read observation file {path}", {"file": path}
        ) from exc
    columns = sorted(
        (c for c in frame.columns if c.startswith("y")), key=lambda c: int(c[1:])
    )
    if "k" not in frame.columns or not columns:
        raise InvalidParams(
            "observation file needs a k column and y<i> columns",
            {"file": path, "columns": list(frame.columns)},
        )
    frame = frame.sort_values("k")
    return ObservationSequence(frame[columns].to_numpy().T)


def read_observation_dir(directory: str) -> List[ObservationSequence]:
    if not os.path.isdir(directory):
        raise InvalidParams(
            f"observation directory {directory} does not exist", {"path": directory}
        )
    names = sorted(
        n
        for n in os.listdir(directory)
        if n.startswith("obs_") and n.endswith(".csv")
    )
    if not names:
        raise InvalidParams(f"no observation files in {directory}", {"path": directory})
    return [read_observations(os.path.join(directory, name)) for name in names]


def write_densities(
    densities: Mapping[TimeIndex, np.ndarray],
    grid: Grid1D,
    time: TimeGrid,
    directory: str,
    long_format: bool = True,
    name: str = "densities",
) -> List[str]:
    """Density values on the grid nodes, one long file or one file per (k, n)."""
    os.makedirs(directory, exist_ok=True)
    nodes = grid.nodes
    indices = sorted(densities)
    if long_format:
        frames = [
            pd.DataFrame(
                {
                    "k": k,
                    "n": n,
                    "t": time.t(k, n),
                    "x": nodes,
                    "value": np.asarray(densities[(k, n)], dtype=float),
                }
            )
            for k, n in indices
        ]
        path = os.path.join(directory, f"{name}.csv")
        frame = pd.concat(frames, ignore_index=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return [path]
    paths = []
    for k, n in indices:
        path = os.path.join(directory, f"{name}_k{k}_n{n}.csv")
        values = np.asarray(densities[(k, n)], dtype=float)
        frame = pd.DataFrame({"x": nodes, "value": values})
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        paths.append(path)
    return paths


def read_densities(path: str) -> Dict[TimeIndex, np.ndarray]:
    frame = pd.read_csv(path, float_precision="round_trip")
    return {
        (int(k), int(n)): group["value"].to_numpy()
        for (k, n), group in frame.groupby(["k", "n"], sort=True)
    }


def write_yaml(payload: dict, path: str):
    with open(path, "w", encoding="utf-8") as fileobj:
        yaml.safe_dump(_plain(payload), fileobj, sort_keys=False)
