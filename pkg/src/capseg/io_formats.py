"""Binary file formats: PPM (P6) images, PGM (P5) masks, row-major RLE.

Images are stored as 8-bit PPM and mapped to [0,1] floats on load; masks
are 0/255 PGM.  RLE encodes a binary mask as run lengths of alternating
values starting with the count of leading zeros (which may be 0).
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H×W×3 float image in [0,1] as binary PPM (P6, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H×W×3 image, got {image.shape}")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, (w, h), maxval, payload = _read_netpbm(fh)
    if magic != b"P6":
        raise ValueError(f"{path}: not a P6 PPM")
    data = np.frombuffer(payload, dtype=np.uint8)
    if data.size != h * w * 3:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(h, w, 3).astype(np.float64) / float(maxval)


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a binary H×W mask as PGM (P5) with values 0/255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected H×W mask, got {mask.shape}")
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, (w, h), _maxval, payload = _read_netpbm(fh)
    if magic != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    data = np.frombuffer(payload, dtype=np.uint8)
    if data.size != h * w:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(h, w) > 127


def _read_netpbm(fh):
    magic = fh.read(2)
    fields = []
    while len(fields) < 3:
        token = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        while ch and not ch.isspace():
            token += ch
            ch = fh.read(1)
        if not token:
            raise ValueError("truncated netpbm header")
        fields.append(int(token))
    w, h, maxval = fields
    return magic, (w, h), maxval, fh.read()


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths of a binary mask, starting with the zero run."""
    flat = np.asarray(mask).astype(bool).ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:  # leading-zero run is empty
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`rle_encode` for the given H×W shape."""
    total = int(np.prod(shape))
    if sum(runs) != total:
        raise ValueError(f"run lengths sum to {sum(runs)}, want {total}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if run < 0:
            raise ValueError("negative run length")
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)
