"""Model checkpoints: one .npz holding metadata JSON plus raw float64 arrays.

Round trips are bit-exact; the format carries a version tag so later readers
can reject files they do not understand.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import InvalidArgumentError, Tensor
from .scaling import (
    CalibNet,
    GeometricScaling,
    LearnableScaling,
    ReverseGeometricScaling,
    ScalingPolicy,
    UnitScaling,
    UniversalScaling,
)
from .unet import BlockParams, UNetModel

FORMAT_VERSION = 1


def _policy_arrays(policy: ScalingPolicy) -> dict[str, np.ndarray]:
    if not isinstance(policy, LearnableScaling):
        return {}
    arrays: dict[str, np.ndarray] = {}
    for idx, calib in enumerate(policy.calibs):
        prefix = f"policy.c{idx}"
        arrays[f"{prefix}.w1"] = calib.w1.data
        arrays[f"{prefix}.w2"] = calib.w2.data
        for dim, (enc_in, enc_out, dec_in, dec_out) in calib.adapters.items():
            arrays[f"{prefix}.enc{dim}.in"] = enc_in.data
            arrays[f"{prefix}.enc{dim}.out"] = enc_out.data
            arrays[f"{prefix}.dec{dim}.in"] = dec_in.data
            arrays[f"{prefix}.dec{dim}.out"] = dec_out.data
    return arrays


def save_checkpoint(model: UNetModel, path: str) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "m": model.m,
        "l": model.l,
        "N": model.N,
        "policy": model.policy.describe(),
    }
    arrays: dict[str, np.ndarray] = {}
    for i, block in enumerate(model.encoders, start=1):
        for j, w in enumerate(block.weights, start=1):
            arrays[f"enc{i}.w{j}"] = w.data
    for j, w in enumerate(model.middle.weights, start=1):
        arrays[f"mid.w{j}"] = w.data
    for i, block in enumerate(model.decoders, start=1):
        for j, w in enumerate(block.weights, start=1):
            arrays[f"dec{i}.w{j}"] = w.data
    arrays.update(_policy_arrays(model.policy))
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def _rebuild_policy(desc: dict, arrays) -> ScalingPolicy:
    variant = desc["variant"]
    if variant == "unit":
        return UnitScaling()
    if variant == "universal":
        return UniversalScaling(desc["kappa"], unsafe=desc.get("unsafe", False))
    if variant == "geometric":
        return GeometricScaling(desc["kappa"], unsafe=desc.get("unsafe", False))
    if variant == "reverse-geometric":
        return ReverseGeometricScaling(desc["kappa"], unsafe=desc.get("unsafe", False))
    if variant == "learnable":
        count = desc.get("connections", 1) if desc.get("per_connection") else 1
        calibs = []
        for idx in range(count):
            prefix = f"policy.c{idx}"
            calib = CalibNet.__new__(CalibNet)
            w1 = np.asarray(arrays[f"{prefix}.w1"])
            calib.channels = w1.shape[0]
            calib.hidden = w1.shape[1]
            calib.r = desc["r"]
            calib.w1 = Tensor(w1, requires_grad=True)
            calib.w2 = Tensor(np.asarray(arrays[f"{prefix}.w2"]), requires_grad=True)
            calib.adapters = {}
            calib._rng = None
            for dim in desc.get("adapter_dims", []):
                calib.adapters[int(dim)] = (
                    Tensor(np.asarray(arrays[f"{prefix}.enc{dim}.in"]), requires_grad=True),
                    Tensor(np.asarray(arrays[f"{prefix}.enc{dim}.out"]), requires_grad=True),
                    Tensor(np.asarray(arrays[f"{prefix}.dec{dim}.in"]), requires_grad=True),
                    Tensor(np.asarray(arrays[f"{prefix}.dec{dim}.out"]), requires_grad=True),
                )
            calibs.append(calib)
        if desc.get("per_connection"):
            return LearnableScaling(calibs, channels=desc["channels"])
        return LearnableScaling(calibs[0], channels=desc["channels"])
    raise InvalidArgumentError(f"unknown policy variant {variant!r} in checkpoint")


def load_checkpoint(path: str) -> UNetModel:
    with np.load(path) as arrays:
        meta = json.loads(str(arrays["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise InvalidArgumentError(
                f"unsupported checkpoint format {meta.get('format_version')!r}"
            )
        m, l, N = meta["m"], meta["l"], meta["N"]
        encoders = [
            BlockParams([Tensor(np.asarray(arrays[f"enc{i}.w{j}"]), requires_grad=True)
                         for j in range(1, l + 1)])
            for i in range(1, N + 1)
        ]
        middle = BlockParams([Tensor(np.asarray(arrays[f"mid.w{j}"]), requires_grad=True)
                              for j in range(1, l + 1)])
        decoders = [
            BlockParams([Tensor(np.asarray(arrays[f"dec{i}.w{j}"]), requires_grad=True)
                         for j in range(1, l + 1)])
            for i in range(1, N + 1)
        ]
        policy = _rebuild_policy(meta["policy"], arrays)
    return UNetModel(m=m, l=l, N=N, encoders=encoders, decoders=decoders,
                     middle=middle, policy=policy)
