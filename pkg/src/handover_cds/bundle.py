"""Model bundle layout: everything the controller needs, on disk.

A bundle directory holds the leader and follower dynamics, the two
coupling channels, the calibrated recognizer, a metadata document (model
version, rest posture, tick defaults), and the fit digest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import jsonio
from .cds import (
    CoupledSystem,
    coupling_from_document,
    coupling_to_document,
)
from .errors import FormatError
from .recognition import RecognizerConfig, load_recognizer
from .seds import load_stable_ds, save_stable_ds

BUNDLE_FILES = (
    "leader.json",
    "follower.json",
    "coupling_proximity.json",
    "coupling_height.json",
    "recognizer.json",
    "bundle.json",
)


@dataclass(frozen=True)
class ModelBundle:
    system: CoupledSystem
    recognizer: RecognizerConfig
    model_version: str
    follower_rest: np.ndarray     # hold posture while intent is Other
    meta: dict


def _system_fingerprint(system: CoupledSystem) -> str:
    from .cds import coupled_system_to_document

    text = jsonio.render(coupled_system_to_document(system))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def save_bundle(
    out_dir,
    system: CoupledSystem,
    recognizer_doc: dict,
    follower_rest,
    extra_meta: dict | None = None,
) -> str:
    """Write all bundle artifacts; returns the model version string."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_stable_ds(system.master, out / "leader.json")
    save_stable_ds(system.slave, out / "follower.json")
    names = ("coupling_proximity.json", "coupling_height.json")
    for name, channel in zip(names, system.couplings):
        jsonio.write_document(out / name, coupling_to_document(channel))
    jsonio.write_document(out / "recognizer.json", recognizer_doc)
    version = _system_fingerprint(system)
    meta = {
        "kind": "handover-bundle",
        "model_version": version,
        "alpha": float(system.alpha),
        "beta": float(system.beta),
        "follower_rest": [float(v) for v in follower_rest],
    }
    meta.update(extra_meta or {})
    jsonio.write_document(out / "bundle.json", meta)
    return version


def load_bundle(bundle_dir) -> ModelBundle:
    root = Path(bundle_dir)
    meta_path = root / "bundle.json"
    if not meta_path.exists():
        raise FormatError(f"{root} is not a model bundle (no bundle.json)")
    meta = jsonio.read_document(meta_path)
    if meta.get("kind") != "handover-bundle":
        raise FormatError(f"{meta_path} is not a handover bundle document")
    master = load_stable_ds(root / "leader.json")
    slave = load_stable_ds(root / "follower.json")
    channels = tuple(
        coupling_from_document(jsonio.read_document(root / name))
        for name in ("coupling_proximity.json", "coupling_height.json")
    )
    system = CoupledSystem(
        master=master,
        couplings=channels,
        slave=slave,
        alpha=float(meta["alpha"]),
        beta=float(meta["beta"]),
    )
    recognizer = load_recognizer(root / "recognizer.json")
    return ModelBundle(
        system=system,
        recognizer=recognizer,
        model_version=str(meta["model_version"]),
        follower_rest=np.asarray(meta["follower_rest"], dtype=np.float64),
        meta=meta,
    )
