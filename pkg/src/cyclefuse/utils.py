"""Seed derivation, input validation and checkpoint container helpers."""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import torch

from .cohort import Cohort, CohortError, LABELS

CHECKPOINT_MAGIC = b"CYCLEFUSE-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def derive_seed(master: int, *keys) -> int:
    """32-bit seed from sha256 of ``"master/key1/key2/..."``.

    Lets any component (a fold's GAN, one classifier strategy) be rerun in
    isolation with the seed it would get inside a full experiment.
    """
    text = "/".join(str(k) for k in (master, *keys))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def check_cohort(cohort, *, complete=False, both_modalities=False, both_classes=False) -> Cohort:
    if not isinstance(cohort, Cohort):
        raise TypeError(f"expected a Cohort, got {type(cohort).__name__}")
    if len(cohort) == 0:
        raise CohortError("cohort is empty")
    if complete and not cohort.is_complete:
        n = sum(not r.is_paired for r in cohort)
        raise CohortError(f"cohort has {n} records with a missing modality")
    if both_modalities:
        if not any(r.fnc is not None for r in cohort):
            raise CohortError("cohort has no FNC vectors")
        if not any(r.t1 is not None for r in cohort):
            raise CohortError("cohort has no volumes")
    if both_classes and len(set(cohort.labels.tolist())) < len(LABELS):
        raise CohortError("cohort contains a single diagnosis class")
    return cohort


def save_container(payload: dict, path) -> None:
    """Write ``payload`` with a magic header and sha256 digest."""
    buf = io.BytesIO()
    torch.save({"format_version": CHECKPOINT_VERSION, **payload}, buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).hexdigest().encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + digest + b"\n" + body)


def load_container(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    digest, sep, body = rest.partition(b"\n")
    if not sep or hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: integrity check failed (truncated or corrupted)")
    payload = torch.load(io.BytesIO(body), weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {payload.get('format_version')}")
    return payload


def to_tensor(arr, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=dtype)
