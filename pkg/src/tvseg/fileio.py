"""Binary formats: PPM/PGM images, Middlebury .flo, dataset directories, checkpoints."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .world import ClipSample, VOCAB

FLO_MAGIC = b"PIEH"
CKPT_MAGIC = b"TVSEGCKP"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def _netpbm_header(buf: bytes, magic: bytes) -> tuple:
    """Parse ``magic width height maxval`` (comments allowed); return values and payload offset."""
    if not buf.startswith(magic):
        raise FormatError(f"expected {magic!r} header")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def write_ppm(path, image: np.ndarray) -> None:
    """``[3, H, W]`` floats in [0, 1] (or uint8 ``[H, W, 3]``) -> binary P6, maxval 255."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> ``[3, H, W]`` float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, maxval, off = _netpbm_header(buf, b"P6")
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    data = np.frombuffer(buf, np.uint8, count=3 * w * h, offset=off).reshape(h, w, 3)
    return data.transpose(2, 0, 1) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    """Boolean ``[H, W]`` mask -> binary P5 with 0 background, 255 foreground."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, maxval, off = _netpbm_header(buf, b"P5")
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    return np.frombuffer(buf, np.uint8, count=w * h, offset=off).reshape(h, w) >= 128


def write_flo(path, flow: np.ndarray) -> None:
    """``[2, H, W]`` (u, v) -> Middlebury .flo (little-endian, interleaved float32)."""
    u, v = np.asarray(flow)
    h, w = u.shape
    body = np.stack([u, v], axis=-1).astype("<f4").tobytes()
    Path(path).write_bytes(FLO_MAGIC + struct.pack("<ii", w, h) + body)


def read_flo(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {buf[:4]!r}")
    w, h = struct.unpack("<ii", buf[4:12])
    if len(buf) != 12 + 8 * w * h:
        raise FormatError(f"{path}: size {len(buf)} does not match {w}x{h}")
    data = np.frombuffer(buf, "<f4", offset=12).reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float64)


def vocab_lines() -> str:
    return "".join(f"{i} {w}\n" for i, w in enumerate(VOCAB))


def write_dataset(root, clips: list) -> None:
    """``clip_<k>/{frame,flow,mask}_<t>.*``, ``text.txt``, ``manifest.txt`` and ``vocab.txt``.

    ``vocab.txt`` records the fixed ``id word`` table the token ids refer to.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for k, clip in enumerate(clips):
        name = clip.name or f"clip_{k:05d}"
        d = root / name
        d.mkdir(exist_ok=True)
        for t in range(clip.frames.shape[0]):
            write_ppm(d / f"frame_{t}.ppm", clip.frames[t])
            write_flo(d / f"flow_{t}.flo", clip.flows[t])
            write_pgm(d / f"mask_{t}.pgm", clip.gt_masks[t])
        (d / "text.txt").write_text(" ".join(clip.words) + "\n", encoding="utf-8")
        names.append(name)
    (root / "manifest.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
    (root / "vocab.txt").write_text(vocab_lines(), encoding="utf-8")


def read_dataset(root) -> list:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(f"{root} has no manifest.txt")
    vocab = root / "vocab.txt"
    if vocab.exists() and vocab.read_text(encoding="utf-8") != vocab_lines():
        raise FormatError(f"{vocab} does not match this build's vocabulary")
    clips = []
    for name in manifest.read_text(encoding="utf-8").split():
        d = root / name
        n_t = len(list(d.glob("frame_*.ppm")))
        frames = np.stack([read_ppm(d / f"frame_{t}.ppm") for t in range(n_t)])
        flows = np.stack([read_flo(d / f"flow_{t}.flo") for t in range(n_t)])
        masks = np.stack([read_pgm(d / f"mask_{t}.pgm") for t in range(n_t)])
        words = (d / "text.txt").read_text(encoding="utf-8").split()
        unknown = [w for w in words if w not in VOCAB]
        if unknown:
            raise FormatError(f"{d}/text.txt: unknown words {unknown}")
        clips.append(ClipSample(frames, flows, words, masks, name))
    return clips


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    """Magic, uint32 version, metadata block, then a named float64 tensor table.

    Layout (all little-endian)::

        b"TVSEGCKP" u32 version
        u32 meta_len, meta bytes (UTF-8 ``key = value`` lines)
        u32 n_tensors
        per tensor: u16 name_len, name, u8 ndim, u32 dims..., float64 payload
    """
    out = bytearray(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    meta_bytes = "".join(f"{k} = {v}\n" for k, v in meta.items()).encode("utf-8")
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple:
    """Return ``(tensors, meta)`` as written by :func:`save_checkpoint`."""
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = {}
    for line in buf[pos:pos + mlen].decode("utf-8").splitlines():
        k, _, v = line.partition(" = ")
        meta[k] = v
    pos += mlen
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nl].decode("utf-8")
        pos += nl
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, "<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, meta
