"""Readers and writers for ``.cube`` LUTs, 8-bit images, token files and
JSON-lines manifests.

Images are treated as display-referred: 8-bit sRGB code values are divided
by 255 and used directly, with no linearization.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .errors import (
    CodebookMismatchError,
    DimensionMismatchError,
    FormatError,
    InputError,
    MissingSizeError,
    ParseError,
    TokenFormatError,
    TruncationError,
    UnsupportedFormatError,
    UnsupportedVariantError,
)
from .lut import Lut3d, as_image

N_TOKENS = 64
SOURCE_TAGS = ("filter", "expert", "fuse")


@dataclass
class CubeFile:
    title: str | None
    lut_size: int
    domain_min: tuple[float, float, float]
    domain_max: tuple[float, float, float]
    entries: np.ndarray  # (lut_size**3, 3), red fastest


def _open_text(source) -> IO[str]:
    if isinstance(source, str) and "\n" in source:
        return io.StringIO(source)
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8")
    return source


def read_cube_file(source) -> CubeFile:
    """Parse ``.cube`` text (a stream, a path, or the text itself) without
    remapping or clamping."""
    stream = _open_text(source)
    close = stream is not source
    try:
        return _parse_cube_lines(stream)
    finally:
        if close:
            stream.close()


def _floats(parts: list[str], count: int, lineno: int, keyword: str) -> tuple[float, ...]:
    if len(parts) != count:
        raise ParseError(f"{keyword} expects {count} values, got {len(parts)}", lineno)
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise ParseError(f"non-numeric value in {keyword}: {' '.join(parts)!r}", lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError(f"non-finite value in {keyword}", lineno)
    return vals


def _parse_cube_lines(stream: IO[str]) -> CubeFile:
    title = None
    size = None
    dmin = (0.0, 0.0, 0.0)
    dmax = (1.0, 1.0, 1.0)
    rows: list[tuple[float, float, float]] = []
    last_line = 0
    domain_line = None
    for lineno, raw in enumerate(stream, start=1):
        last_line = lineno
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0].upper()
        if key[0].isalpha():
            if rows:
                raise ParseError(f"keyword {parts[0]!r} after data lines", lineno)
            if key == "TITLE":
                title = line[len(parts[0]):].strip().strip('"')
            elif key == "LUT_3D_SIZE":
                if len(parts) != 2 or not parts[1].isdigit():
                    raise ParseError("LUT_3D_SIZE expects one integer", lineno)
                size = int(parts[1])
                if size < 2:
                    raise ParseError(f"LUT_3D_SIZE must be >= 2, got {size}", lineno)
            elif key == "LUT_1D_SIZE":
                raise UnsupportedVariantError("1D LUTs are not supported", lineno)
            elif key == "DOMAIN_MIN":
                dmin = _floats(parts[1:], 3, lineno, key)
                domain_line = lineno
            elif key == "DOMAIN_MAX":
                dmax = _floats(parts[1:], 3, lineno, key)
                domain_line = lineno
            elif key in ("LUT_1D_INPUT_RANGE", "LUT_3D_INPUT_RANGE"):
                lo, hi = _floats(parts[1:], 2, lineno, key)
                dmin, dmax = (lo,) * 3, (hi,) * 3
                domain_line = lineno
            else:
                raise ParseError(f"unknown keyword {parts[0]!r}", lineno)
            continue
        if size is None:
            raise MissingSizeError("data before LUT_3D_SIZE", lineno)
        rows.append(_floats(parts, 3, lineno, "data row"))
    if size is None:
        raise MissingSizeError("missing LUT_3D_SIZE", last_line or None)
    if not all(lo < hi for lo, hi in zip(dmin, dmax)):
        raise ParseError("DOMAIN_MIN must be below DOMAIN_MAX in every channel", domain_line)
    if len(rows) != size**3:
        raise TruncationError(f"expected {size**3} data rows, found {len(rows)}", last_line)
    entries = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    return CubeFile(title, size, dmin, dmax, entries)


def cube_to_lut(cube: CubeFile) -> tuple[Lut3d, int]:
    """Normalize a parsed cube to the ``[0, 1]`` domain and clamp.

    Returns the LUT and the number of components that had to be clamped.
    """
    lo = np.asarray(cube.domain_min)
    hi = np.asarray(cube.domain_max)
    vals = (cube.entries - lo) / (hi - lo)
    clamped = int(np.count_nonzero((vals < 0.0) | (vals > 1.0)))
    return Lut3d.from_flat(np.clip(vals, 0.0, 1.0), cube.lut_size), clamped


def parse_cube(source) -> tuple[Lut3d, int]:
    """Parse a ``.cube`` stream into a LUT.

    Non-default DOMAIN_MIN/MAX are remapped linearly onto ``[0, 1]``, in both
    the lattice and the stored values. Out-of-range values are clamped and
    counted; the count is returned alongside the LUT.
    """
    return cube_to_lut(read_cube_file(source))


def load_cube(path) -> Lut3d:
    lut, clamped = parse_cube(Path(path))
    if clamped:
        warnings.warn(f"{path}: {clamped} LUT components clamped to [0, 1]", stacklevel=2)
    return lut


def write_cube(lut: Lut3d, precision: int = 6, title: str | None = None) -> str:
    lines = []
    if title:
        lines.append(f'TITLE "{title}"')
    lines.append(f"LUT_3D_SIZE {lut.size}")
    lines.append("DOMAIN_MIN 0.0 0.0 0.0")
    lines.append("DOMAIN_MAX 1.0 1.0 1.0")
    fmt = f"{{:.{int(precision)}f}} {{:.{int(precision)}f}} {{:.{int(precision)}f}}"
    lines.extend(fmt.format(*row) for row in lut.flat())
    return "\n".join(lines) + "\n"


def save_cube(lut: Lut3d, path, precision: int = 6, title: str | None = None) -> None:
    Path(path).write_text(write_cube(lut, precision, title), encoding="utf-8")


# -- images -----------------------------------------------------------------


def _read_ppm(data: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncationError("truncated PPM header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError("malformed PPM header") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit PPM is supported (maxval {maxval})")
    if width < 1 or height < 1:
        raise FormatError("PPM dimensions must be positive")
    need = width * height * 3
    raster = data[pos : pos + need]
    if len(raster) < need:
        raise TruncationError(f"PPM raster has {len(raster)} of {need} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode 8-bit PPM (P6) or PNG bytes into ``(H, W, 3)`` float64."""
    if data[:2] == b"P6":
        u8 = _read_ppm(data)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        try:
            with Image.open(io.BytesIO(data)) as im:
                im.load()
                if im.mode not in ("RGB", "RGBA", "L", "P"):
                    raise UnsupportedFormatError(f"unsupported PNG mode {im.mode}")
                u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, SyntaxError) as exc:
            raise TruncationError(f"unreadable PNG: {exc}") from None
    else:
        raise UnsupportedFormatError("expected an 8-bit PNG or binary PPM (P6) image")
    return u8.astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    return decode_image_bytes(path.read_bytes())


def encode_image(img, fmt: str) -> bytes:
    img = as_image(img)
    u8 = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    fmt = fmt.lower().lstrip(".")
    if fmt == "ppm":
        h, w, _ = u8.shape
        return f"P6\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()
    if fmt == "png":
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()
    raise UnsupportedFormatError(f"unsupported image format {fmt!r}")


def write_image(img, path, expected_shape: tuple[int, int] | None = None) -> None:
    """Write ``img`` as PNG or PPM, chosen by the file suffix."""
    img = as_image(img)
    if expected_shape is not None and img.shape[:2] != tuple(expected_shape):
        raise DimensionMismatchError(f"image is {img.shape[:2]}, expected {tuple(expected_shape)}")
    path = Path(path)
    Path(path).write_bytes(encode_image(img, path.suffix or "png"))


# -- token files ------------------------------------------------------------


def codebook_hash(entries: np.ndarray) -> str:
    """Short checksum of a codebook's float32 little-endian bytes."""
    blob = np.ascontiguousarray(entries, dtype="<f4").tobytes()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TokenRecord:
    lut_id: str
    codebook_hash: str
    tokens: tuple[int, ...]

    def validate(self, k: int = 256) -> None:
        if len(self.tokens) != N_TOKENS:
            raise TokenFormatError(f"{self.lut_id}: expected {N_TOKENS} tokens, got {len(self.tokens)}")
        bad = [t for t in self.tokens if not 0 <= t < k]
        if bad:
            raise TokenFormatError(f"{self.lut_id}: token {bad[0]} outside [0, {k})")
        if not self.lut_id or any(c in self.lut_id for c in "\t\n"):
            raise TokenFormatError("lut_id must be non-empty and free of tabs/newlines")


def format_token_record(record: TokenRecord, k: int = 256) -> str:
    record.validate(k)
    return f"{record.lut_id}\t{record.codebook_hash}\t{' '.join(map(str, record.tokens))}\n"


def write_tokens(records: Iterable[TokenRecord], stream: IO[str], k: int = 256) -> None:
    for rec in records:
        stream.write(format_token_record(rec, k))


def read_tokens(stream, k: int = 256, expected_hash: str | None = None) -> list[TokenRecord]:
    """Read token records; reject wrong counts, out-of-range indices and
    records bound to a different codebook than ``expected_hash``."""
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "r", encoding="utf-8") as fh:
            return read_tokens(fh, k, expected_hash)
    out = []
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TokenFormatError("expected lut_id<TAB>hash<TAB>tokens", lineno)
        try:
            tokens = tuple(int(t) for t in parts[2].split(" "))
        except ValueError:
            raise TokenFormatError("non-integer token", lineno) from None
        rec = TokenRecord(parts[0], parts[1], tokens)
        try:
            rec.validate(k)
        except TokenFormatError as exc:
            raise TokenFormatError(str(exc), lineno) from None
        if expected_hash is not None and rec.codebook_hash != expected_hash:
            raise CodebookMismatchError(
                f"record bound to codebook {rec.codebook_hash}, loaded codebook is {expected_hash}", lineno
            )
        out.append(rec)
    return out


# -- JSON-lines manifests ---------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    source_tag: str = "filter"


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", lineno) from None
    return out


def write_jsonl(rows: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Read a LUT-library manifest; relative paths resolve against its directory."""
    base = Path(path).parent
    entries = []
    for lineno, row in enumerate(read_jsonl(path), start=1):
        try:
            entry = ManifestEntry(str(row["id"]), str(row["path"]), str(row.get("source_tag", "filter")))
        except KeyError as exc:
            raise FormatError(f"manifest row missing {exc.args[0]!r}", lineno) from None
        if entry.source_tag not in SOURCE_TAGS:
            raise FormatError(f"source_tag must be one of {SOURCE_TAGS}, got {entry.source_tag!r}", lineno)
        p = Path(entry.path)
        entries.append(ManifestEntry(entry.id, str(p if p.is_absolute() else base / p), entry.source_tag))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError(f"duplicate ids in manifest {path}")
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    write_jsonl((asdict(e) for e in entries), path)


def read_image_manifest(path) -> dict[str, str]:
    """``{id: path}`` from a JSON-lines image manifest of ``{id, path}`` rows."""
    base = Path(path).parent
    out: dict[str, str] = {}
    for lineno, row in enumerate(read_jsonl(path), start=1):
        try:
            key, p = str(row["id"]), Path(str(row["path"]))
        except KeyError as exc:
            raise FormatError(f"image manifest row missing {exc.args[0]!r}", lineno) from None
        if key in out:
            raise FormatError(f"duplicate image id {key!r}", lineno)
        out[key] = str(p if p.is_absolute() else base / p)
    return out
