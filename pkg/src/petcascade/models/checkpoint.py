"""Model checkpoints: JSON header + little-endian float32 parameter blob.

A checkpoint is <stem>.model.json plus <stem>.model.raw. The header records
the architecture descriptor (enough to rebuild the module), tensor names,
shapes and offsets, an optional TrainConfig echo, and the training seed.
load_model(save_model(m)) reproduces forward outputs bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..dataio import HeaderMismatchError, MissingCaseFileError, ValidationError, _json_bytes
from .anchors import AnchorGrid
from .nets import Baseline3DNet, ClassifierNet, DetectorNet, SegmentorNet


def arch_descriptor(net: torch.nn.Module) -> dict:
    if isinstance(net, ClassifierNet):
        return {"kind": "classifier", "channels": list(net.channels)}
    if isinstance(net, DetectorNet):
        g = net.anchor_grid
        return {
            "kind": "detector", "channels": list(net.channels),
            "image_size": g.image_size, "stride": g.stride,
            "sizes": list(g.sizes), "ratios": list(g.ratios),
            "nms_iou_threshold": net.nms_iou_threshold,
            "score_threshold": net.score_threshold,
        }
    if isinstance(net, SegmentorNet):
        return {"kind": "segmentor", "channels": list(net.channels)}
    if isinstance(net, Baseline3DNet):
        return {"kind": "baseline3d", "channels": list(net.channels), "grid": list(net.grid)}
    raise ValidationError(f"unknown model type {type(net).__name__}")


def build_model(arch: dict) -> torch.nn.Module:
    kind = arch.get("kind")
    if kind == "classifier":
        return ClassifierNet(tuple(arch["channels"]))
    if kind == "detector":
        grid = AnchorGrid(arch["image_size"], arch["stride"],
                          tuple(arch["sizes"]), tuple(arch["ratios"]))
        return DetectorNet(tuple(arch["channels"]), grid,
                           arch["nms_iou_threshold"], arch["score_threshold"])
    if kind == "segmentor":
        return SegmentorNet(tuple(arch["channels"]))
    if kind == "baseline3d":
        return Baseline3DNet(tuple(arch["grid"]), tuple(arch["channels"]))
    raise ValidationError(f"unknown architecture kind {kind!r}")


def save_model(stem: Path, net: torch.nn.Module, train_config: dict | None = None,
               seed: int | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    tensors = []
    chunks = []
    offset = 0
    for name, tensor in state.items():
        array = tensor.detach().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(array.shape),
                        "offset": offset, "numel": int(array.size)})
        chunks.append(array.tobytes())
        offset += array.size
    header = {
        "format": "petcascade-model/1",
        "arch": arch_descriptor(net),
        "dtype": "float32",
        "byte_order": "little",
        "tensors": tensors,
        "train_config": train_config,
        "seed": seed,
    }
    header_path = stem.with_suffix(".model.json")
    raw_path = stem.with_suffix(".model.raw")
    header_path.write_bytes(_json_bytes(header))
    raw_path.write_bytes(b"".join(chunks))
    return header_path, raw_path


def load_model(stem: Path) -> tuple[torch.nn.Module, dict]:
    stem = Path(stem)
    header_path = stem.with_suffix(".model.json")
    raw_path = stem.with_suffix(".model.raw")
    if not header_path.exists():
        raise MissingCaseFileError(f"missing checkpoint header: {header_path}")
    if not raw_path.exists():
        raise MissingCaseFileError(f"missing checkpoint blob: {raw_path}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    blob = np.frombuffer(raw_path.read_bytes(), dtype="<f4")

    net = build_model(header["arch"])
    state = net.state_dict()
    expected = sum(int(t.numel()) for t in state.values())
    if blob.size != expected:
        raise HeaderMismatchError(
            f"{raw_path.name}: blob has {blob.size} floats, architecture requires {expected}"
        )
    described = {t["name"]: t for t in header["tensors"]}
    new_state = {}
    for name, tensor in state.items():
        if name not in described:
            raise HeaderMismatchError(f"checkpoint is missing tensor {name}")
        meta = described[name]
        if tuple(meta["shape"]) != tuple(tensor.shape):
            raise HeaderMismatchError(
                f"tensor {name}: checkpoint shape {meta['shape']} != model shape {tuple(tensor.shape)}"
            )
        start = int(meta["offset"])
        values = blob[start:start + int(meta["numel"])].reshape(meta["shape"]).copy()
        new_state[name] = torch.as_tensor(values)
    net.load_state_dict(new_state)
    net.eval()
    return net, header
