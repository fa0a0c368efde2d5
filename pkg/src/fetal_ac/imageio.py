"""Netpbm image I/O, sidecar metadata and dataset manifests.

Only the binary 8-bit variants are supported: P5 (grayscale) and P6 (RGB).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated netpbm header")
    return buf[start:pos], pos


def _read_netpbm(path) -> tuple[bytes, np.ndarray]:
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos)
    if channels == 1:
        return magic, data.reshape(height, width).copy()
    return magic, data.reshape(height, width, 3).copy()


def read_pgm(path) -> np.ndarray:
    magic, img = _read_netpbm(path)
    if magic != b"P5":
        raise FormatError(f"{path}: expected P5 (grayscale)")
    return img


def read_ppm(path) -> np.ndarray:
    magic, img = _read_netpbm(path)
    if magic != b"P6":
        raise FormatError(f"{path}: expected P6 (RGB)")
    return img


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise FormatError("write_ppm expects an (H, W, 3) uint8 array")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_keyvalue(path) -> dict[str, str]:
    """Parse a ``key=value`` text file; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, values: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Sidecar:
    probe_origin_x: float | None = None
    probe_origin_y: float | None = None
    pixel_spacing_mm: float = 1.0

    @property
    def probe_origin(self) -> tuple[float, float] | None:
        if self.probe_origin_x is None or self.probe_origin_y is None:
            return None
        return (self.probe_origin_x, self.probe_origin_y)


_SIDECAR_KEYS = {"probe_origin_x", "probe_origin_y", "pixel_spacing_mm"}


def read_sidecar(path) -> Sidecar:
    kv = read_keyvalue(path)
    unknown = set(kv) - _SIDECAR_KEYS
    if unknown:
        raise FormatError(f"{path}: unknown sidecar keys {sorted(unknown)}")
    return Sidecar(**{k: float(v) for k, v in kv.items()})


def write_sidecar(path, sidecar: Sidecar) -> None:
    values = {}
    if sidecar.probe_origin is not None:
        values["probe_origin_x"] = float(sidecar.probe_origin_x)
        values["probe_origin_y"] = float(sidecar.probe_origin_y)
    values["pixel_spacing_mm"] = float(sidecar.pixel_spacing_mm)
    write_keyvalue(path, values)


@dataclass
class ManifestEntry:
    """One manifest line: file paths plus free-form truth/split fields."""

    id: str
    image: str
    label: str | None = None
    sidecar: str | None = None
    fields: dict[str, str] = field(default_factory=dict)

    def path(self, which: str, root) -> Path | None:
        rel = getattr(self, which)
        if rel is None:
            return None
        return Path(root) / rel

    @property
    def split(self) -> str | None:
        return self.fields.get("split")


_PATH_KEYS = ("id", "image", "label", "sidecar")


def write_manifest(path, entries: list[ManifestEntry], header: dict | None = None) -> None:
    """Write one whitespace-separated ``key=value`` record per line.

    Paths are stored relative to the manifest's directory.
    """
    lines = []
    for k, v in (header or {}).items():
        lines.append(f"# {k}={_fmt(v)}")
    for e in entries:
        toks = [f"id={e.id}", f"image={e.image}"]
        if e.label is not None:
            toks.append(f"label={e.label}")
        if e.sidecar is not None:
            toks.append(f"sidecar={e.sidecar}")
        toks += [f"{k}={_fmt(v)}" for k, v in e.fields.items()]
        lines.append(" ".join(toks))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[list[ManifestEntry], dict[str, str]]:
    entries, header = [], {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                header[k.strip()] = v.strip()
            continue
        rec = {}
        for tok in line.split():
            if "=" not in tok:
                raise FormatError(f"{path}:{lineno}: bad token {tok!r}")
            k, v = tok.split("=", 1)
            rec[k] = v
        if "id" not in rec or "image" not in rec:
            raise FormatError(f"{path}:{lineno}: id and image are required")
        entries.append(
            ManifestEntry(
                id=rec.pop("id"),
                image=rec.pop("image"),
                label=rec.pop("label", None),
                sidecar=rec.pop("sidecar", None),
                fields=rec,
            )
        )
    return entries, header


def relpath(path, start) -> str:
    return os.path.relpath(path, start).replace(os.sep, "/")
