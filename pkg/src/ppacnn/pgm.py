"""Binary PGM (P5) dumps of simulator register planes."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .array import SATURATION, PEArray


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("PGM pixels must be a 2-D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace (comments allowed)
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, np.uint8, count=w * h, offset=pos)
    return raw.reshape(h, w)


def analog_to_gray(values: np.ndarray, bound: float = SATURATION) -> np.ndarray:
    """Map [-bound, bound] linearly onto [0, 255] (0 -> 128), clipping outside."""
    # 0 lands on 127.5, which rint sends to the even neighbour 128
    g = np.rint((np.asarray(values, float) + bound) * (255.0 / (2 * bound)))
    return np.clip(g, 0, 255).astype(np.uint8)


def bits_to_gray(bits: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(bits, bool), 255, 0).astype(np.uint8)


def dump_state(pe: PEArray, directory, bound: float = SATURATION) -> dict:
    """Write one PGM per register plane plus the flag, and ``manifest.json``.

    Returns the manifest: plane name -> file name, with the analog scaling.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    planes = {}
    for name, v in pe.analog.items():
        planes[name] = (f"{name}.pgm", analog_to_gray(v, bound))
    for name, v in pe.bits.items():
        planes[name] = (f"{name}.pgm", bits_to_gray(v))
    planes["FLAG"] = ("FLAG.pgm", bits_to_gray(pe.flag))
    for fname, px in planes.values():
        write_pgm(d / fname, px)
    manifest = {
        "width": pe.width,
        "height": pe.height,
        "analog_range": [-bound, bound],
        "planes": {k: v[0] for k, v in planes.items()},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
