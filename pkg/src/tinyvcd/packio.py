"""On-disk formats: CDPK record packs and CDPR named-tensor params.

Both formats are little-endian and fully deterministic: writing the
same content twice yields byte-identical files.  Arrays are stored as
f32; training math upcasts to f64 on load.

CDPK layout:
    magic "CDPK" | u32 version=1
    header: u32 N, k, F, C, H, W | u64 record_count |
            f32 omega_min, omega_max, tau, lambda
    records: u64 record_seed | u32 n | f32 omega | u8 short_caption_flag |
             f32 prompt[8] | f32 z_noisy[F*C*H*W] | f32 z_target[...] |
             f32 guidance[...]

CDPR layout:
    magic "CDPR" | u32 version=1
    entries until EOF: u32 name_len | name utf8 | u32 rank |
                       u32 extents[rank] | f32 data[prod(extents)]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .toyworld import PROMPT_DIM

PACK_MAGIC = b"CDPK"
PARAMS_MAGIC = b"CDPR"
VERSION = 1


class PackError(Exception):
    """Base for pack-format failures."""


class BadMagicError(PackError):
    pass


class VersionMismatchError(PackError):
    pass


class TruncatedPackError(PackError):
    pass


class ShapeMismatchError(PackError):
    pass


@dataclass
class PackHeader:
    n_steps: int
    k: int
    frames: int
    channels: int
    height: int
    width: int
    record_count: int
    omega_min: float
    omega_max: float
    tau: float
    lam: float

    @property
    def latent_size(self) -> int:
        return self.frames * self.channels * self.height * self.width

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)


@dataclass
class PreprocessedRecord:
    """One solver-target tuple produced by preprocessing."""

    record_seed: int
    n: int
    omega: float
    short_caption: bool
    prompt: np.ndarray     # f32[8]
    z_noisy: np.ndarray    # f32, latent shape
    z_target: np.ndarray   # f32, latent shape
    guidance: np.ndarray   # f32, latent shape; all-zero outside the window

    def validate(self, header: PackHeader) -> None:
        if not (1 <= self.n <= header.n_steps - header.k):
            raise ShapeMismatchError(
                f"record n={self.n} outside [1, {header.n_steps - header.k}]")
        for name in ("z_noisy", "z_target", "guidance"):
            arr = getattr(self, name)
            if arr.shape != header.latent_shape:
                raise ShapeMismatchError(
                    f"record field {name} has shape {arr.shape}, "
                    f"header says {header.latent_shape}")
        if self.prompt.shape != (PROMPT_DIM,):
            raise ShapeMismatchError(f"prompt shape {self.prompt.shape}")


_HEADER_FMT = "<IIIIIIQffff"
_REC_FIXED_FMT = "<QIfB"


def write_pack(path, header: PackHeader, records: list[PreprocessedRecord]) -> None:
    if header.record_count != len(records):
        raise ShapeMismatchError(
            f"header count {header.record_count} != {len(records)} records")
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack(_HEADER_FMT, header.n_steps, header.k, header.frames,
                             header.channels, header.height, header.width,
                             header.record_count, header.omega_min,
                             header.omega_max, header.tau, header.lam))
        for rec in records:
            rec.validate(header)
            fh.write(struct.pack(_REC_FIXED_FMT, rec.record_seed, rec.n,
                                 rec.omega, int(rec.short_caption)))
            fh.write(np.asarray(rec.prompt, dtype="<f4").tobytes())
            for name in ("z_noisy", "z_target", "guidance"):
                fh.write(np.ascontiguousarray(getattr(rec, name), dtype="<f4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedPackError(f"file ends inside {what}")
    return buf


def read_pack(path) -> tuple[PackHeader, list[PreprocessedRecord]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != PACK_MAGIC:
            raise BadMagicError(f"expected {PACK_MAGIC!r}, found {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported pack version {version}")
        raw = _read_exact(fh, struct.calcsize(_HEADER_FMT), "header")
        fields = struct.unpack(_HEADER_FMT, raw)
        header = PackHeader(*fields[:7], *(float(x) for x in fields[7:]))
        size = header.latent_size
        records = []
        for i in range(header.record_count):
            fixed = _read_exact(fh, struct.calcsize(_REC_FIXED_FMT), f"record {i}")
            seed, n, omega, flag = struct.unpack(_REC_FIXED_FMT, fixed)
            prompt = np.frombuffer(
                _read_exact(fh, 4 * PROMPT_DIM, f"record {i} prompt"), dtype="<f4").copy()
            arrays = []
            for name in ("z_noisy", "z_target", "guidance"):
                buf = _read_exact(fh, 4 * size, f"record {i} {name}")
                arrays.append(np.frombuffer(buf, dtype="<f4").reshape(
                    header.latent_shape).copy())
            rec = PreprocessedRecord(seed, n, float(omega), bool(flag),
                                     prompt, *arrays)
            rec.validate(header)
            records.append(rec)
        if fh.read(1):
            raise TruncatedPackError("trailing bytes after final record")
    return header, records


# -- named-tensor params --------------------------------------------------------


def write_params(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, array in tensors:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(array, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_params(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != PARAMS_MAGIC:
            raise BadMagicError(f"expected {PARAMS_MAGIC!r}, found {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported params version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise TruncatedPackError("file ends inside entry name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "entry name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            shape = struct.unpack(f"<{rank}I",
                                  _read_exact(fh, 4 * rank, f"{name} extents"))
            count = int(np.prod(shape)) if rank else 1
            buf = _read_exact(fh, 4 * count, f"{name} data")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)
    return out
