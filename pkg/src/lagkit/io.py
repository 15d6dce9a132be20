"""Binary containers for models, patch sets and supervectors.

Every container starts with a 4-byte magic and a little-endian u32 format
version, followed by a fixed header of u32 sizes and the payload arrays in
row-major order. Model parameters are stored as float64, features and
supervectors as float32.

    LAGM  DiagonalGmm        K, D | weights, means, stds            (f64)
    LAGV  SupervectorBundle  method u8, regions, K, D | values      (f32)
    LAGP  PatchSet           T, D | features, coords                (f32)
    LAGC  PcaModel           input_dim, output_dim | mean, basis, eigenvalues (f64)
    LAGN  NapModel           dim, rank | mean, basis, eigenvalues   (f64)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .classify import NapModel
from .errors import (
    ContainerError,
    MagicMismatchError,
    TruncatedContainerError,
    UnsupportedVersionError,
)
from .gmm import DiagonalGmm
from .pipeline import PatchSet, PcaModel
from .vectorize import Method, SupervectorBundle

FORMAT_VERSION = 1

MAGIC_MODEL = b"LAGM"
MAGIC_VECTOR = b"LAGV"
MAGIC_PATCHES = b"LAGP"
MAGIC_PCA = b"LAGC"
MAGIC_NAP = b"LAGN"

_F64 = np.dtype("<f8")
_F32 = np.dtype("<f4")


def atomic_write_bytes(path, data: bytes):
    """Write via a unique temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        self.data = data
        self.pos = 0
        head = self.take(4, "magic")
        if head != magic:
            raise MagicMismatchError(f"expected magic {magic!r}, found {head!r}")
        (version,) = self.unpack("<I")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"unsupported version {version} for {magic.decode()} (supported: {FORMAT_VERSION})"
            )

    def take(self, n: int, what: str = "payload") -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedContainerError(
                f"truncated container: needed {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), "header"))

    def array(self, dtype: np.dtype, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)

    def finish(self):
        if self.pos != len(self.data):
            raise ContainerError(f"{len(self.data) - self.pos} trailing bytes after payload")


def _header(magic: bytes, fmt: str, *fields) -> bytes:
    return magic + struct.pack("<I" + fmt.lstrip("<"), FORMAT_VERSION, *fields)


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F64).tobytes()


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


# -- DiagonalGmm ------------------------------------------------------------


def encode_gmm(model: DiagonalGmm) -> bytes:
    return (
        _header(MAGIC_MODEL, "II", model.K, model.D)
        + _f64(model.weights)
        + _f64(model.means)
        + _f64(model.stds)
    )


def decode_gmm(data: bytes) -> DiagonalGmm:
    r = _Reader(data, MAGIC_MODEL)
    K, D = r.unpack("<II")
    w = r.array(_F64, (K,))
    mu = r.array(_F64, (K, D))
    sd = r.array(_F64, (K, D))
    r.finish()
    return DiagonalGmm(w, mu, sd)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_gmm(path, model: DiagonalGmm, metadata: dict | None = None):
    atomic_write_bytes(path, encode_gmm(model))
    if metadata is not None:
        atomic_write_text(sidecar_path(path), json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def load_gmm(path) -> DiagonalGmm:
    return decode_gmm(Path(path).read_bytes())


def load_gmm_metadata(path) -> dict:
    p = sidecar_path(path)
    return json.loads(p.read_text()) if p.exists() else {}


# -- SupervectorBundle ------------------------------------------------------


def encode_supervector(bundle: SupervectorBundle) -> bytes:
    return (
        _header(MAGIC_VECTOR, "BIII", bundle.method.tag, bundle.regions, bundle.K, bundle.D)
        + _f32(bundle.values)
    )


def decode_supervector(data: bytes) -> SupervectorBundle:
    r = _Reader(data, MAGIC_VECTOR)
    tag, regions, K, D = r.unpack("<BIII")
    try:
        method = Method.from_tag(tag)
    except ValueError as e:
        raise ContainerError(str(e)) from None
    values = r.array(_F32, (regions * K * method.block_size(D),))
    r.finish()
    return SupervectorBundle(method, K, D, regions, values)


def save_supervector(path, bundle: SupervectorBundle):
    atomic_write_bytes(path, encode_supervector(bundle))


def load_supervector(path) -> SupervectorBundle:
    return decode_supervector(Path(path).read_bytes())


# -- PatchSet ---------------------------------------------------------------


def encode_patches(patches: PatchSet) -> bytes:
    return _header(MAGIC_PATCHES, "II", patches.T, patches.D) + _f32(patches.features) + _f32(patches.coords)


def decode_patches(data: bytes) -> PatchSet:
    r = _Reader(data, MAGIC_PATCHES)
    T, D = r.unpack("<II")
    features = r.array(_F32, (T, D))
    coords = r.array(_F32, (T, 2))
    r.finish()
    return PatchSet(features, coords)


def save_patches(path, patches: PatchSet):
    atomic_write_bytes(path, encode_patches(patches))


def load_patches(path) -> PatchSet:
    return decode_patches(Path(path).read_bytes())


# -- PcaModel / NapModel ----------------------------------------------------


def encode_pca(model: PcaModel) -> bytes:
    evals = model.eigenvalues if model.eigenvalues is not None else np.zeros(model.output_dim)
    return (
        _header(MAGIC_PCA, "II", model.input_dim, model.output_dim)
        + _f64(model.mean)
        + _f64(model.basis)
        + _f64(evals)
    )


def decode_pca(data: bytes) -> PcaModel:
    r = _Reader(data, MAGIC_PCA)
    n_in, n_out = r.unpack("<II")
    mean = r.array(_F64, (n_in,))
    basis = r.array(_F64, (n_out, n_in))
    evals = r.array(_F64, (n_out,))
    r.finish()
    return PcaModel(mean, basis, evals)


def save_pca(path, model: PcaModel):
    atomic_write_bytes(path, encode_pca(model))


def load_pca(path) -> PcaModel:
    return decode_pca(Path(path).read_bytes())


def encode_nap(model: NapModel) -> bytes:
    evals = np.zeros(model.rank) if model.eigenvalues.shape[0] != model.rank else model.eigenvalues
    return (
        _header(MAGIC_NAP, "II", model.dim, model.rank)
        + _f64(model.mean)
        + _f64(model.nuisance_basis)
        + _f64(evals)
    )


def decode_nap(data: bytes) -> NapModel:
    r = _Reader(data, MAGIC_NAP)
    dim, rank = r.unpack("<II")
    mean = r.array(_F64, (dim,))
    basis = r.array(_F64, (rank, dim))
    evals = r.array(_F64, (rank,))
    r.finish()
    return NapModel(mean, basis, evals)


def save_nap(path, model: NapModel):
    atomic_write_bytes(path, encode_nap(model))


def load_nap(path) -> NapModel:
    return decode_nap(Path(path).read_bytes())


_LOADERS = {
    MAGIC_MODEL: decode_gmm,
    MAGIC_VECTOR: decode_supervector,
    MAGIC_PATCHES: decode_patches,
    MAGIC_PCA: decode_pca,
    MAGIC_NAP: decode_nap,
}


def load_any(path):
    """Decode any lagkit container by its magic."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedContainerError("truncated container: missing magic")
    try:
        decoder = _LOADERS[data[:4]]
    except KeyError:
        raise MagicMismatchError(f"unknown container magic {data[:4]!r}") from None
    return decoder(data)
