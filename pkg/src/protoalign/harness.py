"""Run manifests and the experiment steps behind the CLI.

Every run writes ``manifest.json`` with status ``running`` before doing any work and rewrites it
with status ``complete`` (and the output list) at the end, so an interrupted run is detectable
by its stale status. Manifests hold no timestamps: identical inputs give identical manifests.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

from . import __version__
from .benchmark import PGDParams, run_benchmark
from .data import DatasetSpec, load_dataset
from .model import ModelConfig, load_checkpoint
from .reporting import write_report
from .training import PHASES, TrainConfig, train

OUT_ENV = "PROTOALIGN_OUT"
MANIFEST_NAME = "manifest.json"


def output_root(default: str = "runs") -> str:
    return os.environ.get(OUT_ENV, default)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def code_version() -> str:
    """Package version plus a digest of its source files."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for fn in sorted(os.listdir(root)):
        if fn.endswith(".py"):
            h.update(fn.encode() + b"\0")
            with open(os.path.join(root, fn), "rb") as fh:
                h.update(fh.read())
    return f"{__version__}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    status: str = "running"
    code_version: str = field(default_factory=code_version)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config_hash"] = self.config_hash
        return d

    def write(self, out_dir) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
        return path

    def complete(self, out_dir, outputs) -> str:
        missing = [p for p in outputs if not os.path.exists(p)]
        if missing:
            raise FileNotFoundError(f"expected outputs not written: {missing}")
        self.outputs = sorted(os.path.relpath(p, out_dir) for p in outputs)
        self.status = "complete"
        return self.write(out_dir)

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path) as fh:
            d = json.load(fh)
        d.pop("config_hash", None)
        return cls(**d)


def is_complete(out_dir) -> bool:
    path = os.path.join(out_dir, MANIFEST_NAME)
    return os.path.exists(path) and RunManifest.read(path).status == "complete"


def input_checksums(paths) -> dict:
    return {str(p): sha256_file(p) for p in paths}


def run_train(model_cfg: ModelConfig, cfg: TrainConfig, data_root: str, out_dir: str,
              split_file: Optional[str] = None) -> list[str]:
    """Train on the train split and write per-phase checkpoints, the log and the resolved config."""
    spec = DatasetSpec(data_root, split_file, (model_cfg.input_height, model_cfg.input_width))
    config = {"model": model_cfg.to_dict(), "train": cfg.to_dict()}
    manifest = RunManifest("train", config, [cfg.seed])
    manifest.write(out_dir)
    manifest.inputs = input_checksums([spec.split_path])
    data = load_dataset(spec, "train")
    manifest.inputs["train_images"] = data.checksum()
    manifest.write(out_dir)
    train(model_cfg, cfg, data, out_dir)
    cfg_path = os.path.join(out_dir, "train_config.json")
    with open(cfg_path, "w") as fh:
        json.dump(config, fh, sort_keys=True, indent=2)
        fh.write("\n")
    phases = [p for p in PHASES if cfg.prune or p != "pruning"]
    outputs = [os.path.join(out_dir, f"phase_{p}.ckpt") for p in phases]
    outputs += [os.path.join(out_dir, "train_log.csv"), cfg_path]
    manifest.complete(out_dir, outputs)
    return outputs


def run_benchmark_job(checkpoint: str, data_root: str, out_dir: str, params: PGDParams,
                      seed: int = 0, split_file: Optional[str] = None, split: str = "test",
                      batch_size: int = 64) -> list[str]:
    config = {"pgd": asdict(params), "split": split, "batch_size": batch_size}
    manifest = RunManifest("benchmark", config, [seed])
    manifest.write(out_dir)
    ckpt = load_checkpoint(checkpoint)
    mc = ckpt.model.config
    spec = DatasetSpec(data_root, split_file, (mc.input_height, mc.input_width))
    manifest.inputs = input_checksums([checkpoint, spec.split_path])
    data = load_dataset(spec, split)
    manifest.inputs[f"{split}_images"] = data.checksum()
    manifest.write(out_dir)
    report = run_benchmark(ckpt.model, data, params, seed=seed, batch_size=batch_size)
    outputs = write_report(report, out_dir)
    manifest.complete(out_dir, outputs)
    return outputs
