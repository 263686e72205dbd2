"""Saving and loading learned models and per-subject results."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .appearance import GaussWishart
from .field import Deformation, OrientedVolume
from .fit import FitConfig, FitResult, SubjectState
from .nifti import read_volume, write_volume

FORMAT_VERSION = 1
TEMPLATE_FILE = "template.nii"
MANIFEST_FILE = "manifest.txt"


def provenance(config: FitConfig) -> str:
    return f"groupreg cfg={config.digest()} seed={config.seed}"


def _gw_items(prefix: str, gw: GaussWishart) -> dict:
    return {f"{prefix}_m": gw.m.tolist(), f"{prefix}_beta": gw.beta.tolist(),
            f"{prefix}_W": gw.W.tolist(), f"{prefix}_nu": gw.nu.tolist()}


def _gw_from(prefix: str, items: dict) -> GaussWishart:
    return GaussWishart(np.array(items[f"{prefix}_m"]), np.array(items[f"{prefix}_beta"]),
                        np.array(items[f"{prefix}_W"]), np.array(items[f"{prefix}_nu"]))


def write_manifest(path, items: dict) -> None:
    """``key=value`` lines, values JSON-encoded (floats round-trip exactly)."""
    lines = [f"{key}={json.dumps(value)}" for key, value in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    items = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{number}: expected key=value")
        items[key.strip()] = json.loads(value)
    return items


@dataclass
class ModelBundle:
    """A learned log-template with its population priors and settings."""

    template: OrientedVolume
    hyper: GaussWishart
    config: FitConfig
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.template.channels != self.hyper.classes - 1:
            raise ValueError("template channels and prior classes disagree")

    @classmethod
    def from_result(cls, result: FitResult) -> "ModelBundle":
        return cls(result.template, result.hyper, result.config)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_volume(d / TEMPLATE_FILE, self.template, np.float32, provenance(self.config))
        items = {"format_version": self.format_version, "config_hash": self.config.digest(),
                 "classes": self.template.channels, "channels": self.hyper.channels,
                 "template_shape": list(self.template.shape),
                 "config": self.config.to_dict()}
        items.update(_gw_items("prior", self.hyper))
        write_manifest(d / MANIFEST_FILE, items)
        return d

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        d = Path(directory)
        items = read_manifest(d / MANIFEST_FILE)
        version = items.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version!r}")
        template = read_volume(d / TEMPLATE_FILE)
        if list(template.shape) != items["template_shape"] or \
                template.channels != items["classes"]:
            raise ValueError("template file does not match the manifest")
        return cls(template, _gw_from("prior", items), FitConfig.from_dict(items["config"]),
                   version)


def save_deformation(path, d: Deformation, config: FitConfig) -> None:
    """Coordinate map as a 3-channel float32 volume on its own lattice."""
    affine = d.affine if d.affine is not None else np.eye(4)
    write_volume(path, OrientedVolume(d.map, affine), np.float32, provenance(config))


def load_deformation(path) -> Deformation:
    vol = read_volume(path)
    if vol.channels != 3:
        raise ValueError(f"{path}: a deformation needs 3 channels, found {vol.channels}")
    return Deformation(vol.data, affine=vol.affine)


def save_subject(directory, subject: SubjectState, config: FitConfig) -> Path:
    """Forward and inverse deformations, bias field and a parameter manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_deformation(d / "forward.nii", subject.forward(), config)
    save_deformation(d / "inverse.nii", subject.inverse(), config)
    write_volume(d / "bias.nii", OrientedVolume(subject.bias.field(), subject.image.affine),
                 np.float32, provenance(config))
    items = {"format_version": FORMAT_VERSION, "config_hash": config.digest(),
             "name": subject.name, "rigid": subject.rigid.tolist(),
             "template_shape": list(subject.context.template_shape),
             "template_affine": np.asarray(subject.context.template_affine).tolist(),
             "subject_shape": list(subject.image.shape),
             "subject_affine": subject.image.affine.tolist()}
    items.update(_gw_items("posterior", subject.posterior))
    write_manifest(d / MANIFEST_FILE, items)
    return d


def load_subject_maps(directory):
    """Forward and inverse deformations with their lattice metadata restored."""
    d = Path(directory)
    items = read_manifest(d / MANIFEST_FILE)
    fwd = load_deformation(d / "forward.nii")
    inv = load_deformation(d / "inverse.nii")
    t_shape, t_aff = tuple(items["template_shape"]), np.array(items["template_affine"])
    s_shape, s_aff = tuple(items["subject_shape"]), np.array(items["subject_affine"])
    fwd = Deformation(fwd.map, affine=s_aff, target_shape=t_shape, target_affine=t_aff)
    inv = Deformation(inv.map, affine=t_aff, target_shape=s_shape, target_affine=s_aff)
    return fwd, inv, items
