"""Declarative run configuration, seed splitting and reproducibility manifests.

A pipeline config is one JSON document::

    {
      "seed": 0,
      "dsp":   {DspConfig fields},
      "rvq":   {"n_stages", "codebook_size", "code_dim", "alpha", "beta"},
      "train": {TrainConfig fields},
      "mask":  {MaskConfig fields},
      "model": {"n_layers", "d_hidden", "n_heads", "ff_mult", "learned_mask"},
      "optim": {OptimConfig fields},
      "iterate": {"layer": null, "rvq": {...}, "train": {...}},
      "paths": {"audio_dir", "mels_dir", "out_dir"}
    }

Every section is optional. Seeds left out of the train/mask/optim sections are
derived from the root seed: component i gets the first 32-bit word of
``SeedSequence(seed, spawn_key=(i,))`` with i = 0 quantizer training,
1 masking, 2 pretraining, 3 latent-quantizer training, 4 second-iteration
pretraining, 5 second-iteration masking.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dsp import DspConfig
from .errors import DomainError
from .ssl import MaskConfig, ModelConfig, OptimConfig
from .train import QuantizerConfig, TrainConfig

SEED_SLOTS = {
    "train": 0, "mask": 1, "optim": 2,
    "iterate.train": 3, "iterate.optim": 4, "iterate.mask": 5,
}
MODEL_KEYS = ("n_layers", "d_hidden", "n_heads", "ff_mult", "learned_mask")


def derive_seed(root, slot):
    return int(np.random.SeedSequence(root, spawn_key=(SEED_SLOTS[slot],)).generate_state(1)[0])


def _build(cls, section, seed_slot=None, root=None):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise DomainError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if seed_slot is not None and "seed" in known and "seed" not in section:
        section["seed"] = derive_seed(root, seed_slot)
    return cls(**section)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    dsp: DspConfig = field(default_factory=DspConfig)
    rvq: QuantizerConfig = field(default_factory=QuantizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: dict = field(default_factory=dict)
    optim: OptimConfig = field(default_factory=OptimConfig)
    iterate_layer: int = None
    iterate_rvq: QuantizerConfig = None
    iterate_train: TrainConfig = None
    iterate_optim: OptimConfig = None
    iterate_mask: MaskConfig = None
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        seed = int(doc.get("seed", 0))
        it = dict(doc.get("iterate") or {})
        model = dict(doc.get("model") or {})
        unknown = set(model) - set(MODEL_KEYS)
        if unknown:
            raise DomainError(f"unknown model keys: {sorted(unknown)}")
        rvq = _build(QuantizerConfig, doc.get("rvq"))
        optim = _build(OptimConfig, doc.get("optim"), "optim", seed)
        mask = _build(MaskConfig, doc.get("mask"), "mask", seed)
        return cls(
            seed=seed,
            dsp=_build(DspConfig, doc.get("dsp")),
            rvq=rvq,
            train=_build(TrainConfig, doc.get("train"), "train", seed),
            mask=mask,
            model=model,
            optim=optim,
            iterate_layer=it.get("layer"),
            iterate_rvq=_build(QuantizerConfig, it.get("rvq")) if it.get("rvq") else rvq,
            iterate_train=_build(TrainConfig, {**(doc.get("train") or {}), **(it.get("train") or {})},
                                 "iterate.train", seed),
            iterate_optim=_build(OptimConfig, {**(doc.get("optim") or {}), **(it.get("optim") or {})},
                                 "iterate.optim", seed),
            iterate_mask=_build(MaskConfig, {**(doc.get("mask") or {}), **(it.get("mask") or {})},
                                "iterate.mask", seed),
            paths=dict(doc.get("paths") or {}),
        )

    @classmethod
    def load(cls, path, overrides=None):
        doc = json.loads(Path(path).read_text()) if path else {}
        for dotted, value in (overrides or {}).items():
            node = doc
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return cls.from_dict(doc)

    def model_config(self, input_dim, n_stages, codebook_size):
        return ModelConfig(input_dim=input_dim, n_stages=n_stages, codebook_size=codebook_size, **self.model)

    def to_dict(self):
        return {
            "seed": self.seed,
            "dsp": asdict(self.dsp),
            "rvq": asdict(self.rvq),
            "train": asdict(self.train),
            "mask": asdict(self.mask),
            "model": dict(self.model),
            "optim": asdict(self.optim),
            "iterate": {
                "layer": self.iterate_layer,
                "rvq": asdict(self.iterate_rvq),
                "train": asdict(self.iterate_train),
                "optim": asdict(self.iterate_optim),
                "mask": asdict(self.iterate_mask),
            },
            "paths": dict(self.paths),
        }

    def digest(self):
        return sha256_bytes(canonical_json(self.to_dict()))

    def with_seed(self, seed):
        return replace(self, seed=seed)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_bytes(blob):
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path):
    return sha256_bytes(Path(path).read_bytes())


def write_manifest(out_dir, command, config, inputs, artifacts):
    """Record config, input and artifact hashes next to the artifacts."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_sha256": config.digest() if config is not None else None,
        "config": config.to_dict() if config is not None else None,
        "inputs": {Path(p).name: sha256_file(p) for p in sorted(inputs, key=str)},
        "artifacts": {Path(p).name: sha256_file(p) for p in sorted(artifacts, key=str)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
