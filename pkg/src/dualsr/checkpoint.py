"""Versioned checkpoints: network spec + flat parameter arrays + step."""
from __future__ import annotations

import hashlib
import io
import os
import tempfile
from pathlib import Path
from typing import Optional, Tuple

import torch

from .models import DualNet, NetworkSpec, SRNet, build_dual

FORMAT = "dualsr-ckpt/1"


class CheckpointError(ValueError):
    pass


def make_checkpoint(P: SRNet, D: Optional[DualNet] = None, step: int = 0, **meta) -> dict:
    ckpt = {
        "format": FORMAT,
        "spec": P.spec.to_dict(),
        "state": {k: v.detach().to(torch.float32).clone().contiguous()
                  for k, v in P.state_dict().items()},
        "step": int(step),
        "meta": meta,
    }
    if D is not None:
        ckpt["dual"] = {"scale": D.scale, "width": D.width,
                        "state": {k: v.detach().to(torch.float32).clone().contiguous()
                                  for k, v in D.state_dict().items()}}
    return ckpt


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: dict, path) -> Path:
    buf = io.BytesIO()
    torch.save(ckpt, buf)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(ckpt, dict) or ckpt.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} checkpoint")
    return ckpt


def restore(ckpt: dict) -> Tuple[SRNet, Optional[DualNet]]:
    P = SRNet(NetworkSpec.from_dict(ckpt["spec"]))
    P.load_state_dict(ckpt["state"])
    D = None
    if "dual" in ckpt:
        D = build_dual(ckpt["dual"]["scale"], ckpt["dual"]["width"])
        D.load_state_dict(ckpt["dual"]["state"])
    return P, D


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
