"""Checkpoint archive: one zip with a JSON manifest and raw float32 tensors.

Tensor payloads are little-endian float32; exact-precision scalars
(schedule constants, window, scaler statistics) live in the manifest as
JSON doubles. Zip entries carry a fixed timestamp so re-running a
training with identical config and seeds writes byte-identical files.
"""

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import make_schedule
from .radiomics import RadiomicScaler, TeacherHeadParams
from .unet import StudentHead, UNet3D

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Everything inference needs: frozen weights plus data-space metadata."""

    model: UNet3D
    student: StudentHead
    teacher: TeacherHeadParams
    scaler: RadiomicScaler
    schedule_params: tuple     # (T, beta_start, beta_end)
    window: tuple
    widths: tuple
    patch_side: int
    config_hash: str = ""

    @property
    def schedule(self):
        return make_schedule(*self.schedule_params)


def _write_entry(zf, name, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def _tensor_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(ckpt: Checkpoint, path):
    tensors = {}
    for key, t in ckpt.model.state_dict().items():
        tensors[f"model/{key}"] = t.detach().cpu().numpy()
    for key, t in ckpt.student.state_dict().items():
        tensors[f"student/{key}"] = t.detach().cpu().numpy()
    for key in ("W1", "W2", "b1", "b2"):
        tensors[f"teacher/{key}"] = getattr(ckpt.teacher, key)

    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": ckpt.config_hash,
        "schedule": {
            "T": int(ckpt.schedule_params[0]),
            "beta_start": float(ckpt.schedule_params[1]),
            "beta_end": float(ckpt.schedule_params[2]),
        },
        "window": [float(w) for w in ckpt.window],
        "widths": [int(w) for w in ckpt.widths],
        "patch_side": int(ckpt.patch_side),
        "scaler": {
            "mean": [float(x) for x in ckpt.scaler.mean],
            "std": [float(x) for x in ckpt.scaler.std],
        },
        "tensors": {name: list(arr.shape) for name, arr in tensors.items()},
    }

    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name in sorted(tensors):
            _write_entry(zf, f"tensors/{name}.bin", _tensor_bytes(tensors[name]))


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as e:
            raise CheckpointError(f"checkpoint {path} has no manifest") from e
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format {manifest.get('format_version')}"
            )

        tensors = {}
        for name, shape in manifest["tensors"].items():
            raw = zf.read(f"tensors/{name}.bin")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            tensors[name] = arr

    widths = tuple(manifest["widths"])
    model = UNet3D(widths=widths)
    model.load_state_dict({
        key[len("model/"):]: torch.from_numpy(arr.copy())
        for key, arr in tensors.items() if key.startswith("model/")
    })
    model.eval()
    student = StudentHead()
    student.load_state_dict({
        key[len("student/"):]: torch.from_numpy(arr.copy())
        for key, arr in tensors.items() if key.startswith("student/")
    })
    student.eval()
    teacher = TeacherHeadParams(
        W1=tensors["teacher/W1"].astype(np.float64),
        W2=tensors["teacher/W2"].astype(np.float64),
        b1=tensors["teacher/b1"].astype(np.float64),
        b2=tensors["teacher/b2"].astype(np.float64),
    )
    scaler = RadiomicScaler(mean=manifest["scaler"]["mean"],
                            std=manifest["scaler"]["std"])
    sch = manifest["schedule"]
    return Checkpoint(
        model=model,
        student=student,
        teacher=teacher,
        scaler=scaler,
        schedule_params=(sch["T"], sch["beta_start"], sch["beta_end"]),
        window=tuple(manifest["window"]),
        widths=widths,
        patch_side=manifest["patch_side"],
        config_hash=manifest.get("config_hash", ""),
    )


def checkpoint_from_training(trained, config_hash="") -> Checkpoint:
    """Wrap a TrainedModel for serialization."""
    return Checkpoint(
        model=trained.model,
        student=trained.student,
        teacher=trained.teacher,
        scaler=trained.scaler,
        schedule_params=trained.schedule_params,
        window=trained.window,
        widths=trained.widths,
        patch_side=trained.patch_side,
        config_hash=config_hash,
    )
