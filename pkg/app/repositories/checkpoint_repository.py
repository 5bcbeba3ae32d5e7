import hashlib
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from app.schemas import CheckpointManifest, TensorEntry

MANIFEST_NAME = "checkpoint.manifest"
BLOB_NAME = "checkpoint.blob"
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Checkpoint missing, malformed or failing its hash check"""


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class CheckpointRepository:
    """Repository for one phase's checkpoint: a JSON manifest plus a float32 blob"""

    def __init__(self, directory: Path):
        self.directory = Path(directory)

    @property
    def manifest_path(self) -> Path:
        return self.directory / MANIFEST_NAME

    @property
    def blob_path(self) -> Path:
        return self.directory / BLOB_NAME

    def exists(self) -> bool:
        return self.manifest_path.is_file() and self.blob_path.is_file()

    def save(self, kind: str, tensors: Dict[str, np.ndarray], hyperparameters: Optional[Dict[str, Any]] = None) -> CheckpointManifest:
        """
        Write tensors in the given order as little-endian float32

        Args:
            kind: What the checkpoint holds (base, critic, student, lora)
            tensors: Ordered name -> array
            hyperparameters: JSON-serializable settings needed to rebuild the model

        Returns:
            The written manifest
        """
        self.directory.mkdir(parents=True, exist_ok=True)
        blob = b"".join(np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes() for array in tensors.values())
        manifest = CheckpointManifest(
            kind=kind,
            dtype=BLOB_DTYPE.str,
            tensors=[TensorEntry(name=name, shape=list(np.shape(array))) for name, array in tensors.items()],
            hyperparameters=hyperparameters or {},
            parameter_hash=hashlib.sha256(blob).hexdigest()
        )
        _atomic_write(self.blob_path, blob)
        _atomic_write(self.manifest_path, manifest.model_dump_json(indent=2).encode("utf-8"))
        return manifest

    def load(self, kind: Optional[str] = None) -> Tuple[CheckpointManifest, Dict[str, np.ndarray]]:
        """
        Read and verify a checkpoint

        Args:
            kind: Expected kind; None accepts any

        Returns:
            Tuple of (manifest, name -> float64 array)
        """
        if not self.exists():
            raise CheckpointError(f"No checkpoint in {self.directory}")
        try:
            manifest = CheckpointManifest.model_validate_json(self.manifest_path.read_bytes())
        except ValueError as e:
            raise CheckpointError(f"Malformed manifest in {self.directory}: {e}") from None
        if kind is not None and manifest.kind != kind:
            raise CheckpointError(f"Expected a {kind} checkpoint, found {manifest.kind}")

        blob = self.blob_path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest.parameter_hash:
            raise CheckpointError(f"Parameter hash mismatch in {self.directory}")

        dtype = np.dtype(manifest.dtype)
        expected = sum(int(np.prod(entry.shape)) for entry in manifest.tensors) * dtype.itemsize
        if expected != len(blob):
            raise CheckpointError(f"Blob holds {len(blob)} bytes, manifest describes {expected}")

        tensors: Dict[str, np.ndarray] = {}
        offset = 0
        for entry in manifest.tensors:
            count = int(np.prod(entry.shape))
            flat = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
            tensors[entry.name] = flat.reshape(entry.shape).astype(np.float64)
            offset += count * dtype.itemsize
        return manifest, tensors
