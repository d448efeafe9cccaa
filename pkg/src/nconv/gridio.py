"""File formats: 16-bit depth PNGs, raw grid blobs, checkpoints, configs.

Depth PNG convention: single-channel 16-bit, metres = stored / 256, stored
value 0 means missing. Grid blobs ("CGRD1") are a 16-byte header (5-byte
magic, 3-byte dtype code f32|f64|u16, little-endian uint32 rows and cols)
followed by the row-major little-endian payload. Checkpoints are a text
manifest (version magic, config keys, parameter names and shapes) followed
by one grid blob per parameter; parameters are stored as float64, so
save/load/forward round-trips are bit-exact.

All writers go through a temp-file-plus-rename so interrupted runs never
leave truncated artifacts.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Array
from .networks import Pipeline, PipelineConfig
from .synth import Sample

GRID_MAGIC = b"CGRD1"
CHECKPOINT_MAGIC = "NCKPT1"

_DTYPES = {b"f32": np.dtype("<f4"), b"f64": np.dtype("<f8"), b"u16": np.dtype("<u2")}
_CODES = {np.dtype("float32"): b"f32", np.dtype("float64"): b"f64",
          np.dtype("uint16"): b"u16"}


class FormatError(Exception):
    pass


class CheckpointError(Exception):
    pass


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# depth PNGs
# ---------------------------------------------------------------------------

def write_depth_png(path: str | Path, depth_m: Array) -> None:
    """Store metres as uint16 counts of 1/256 m; zero encodes missing."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    stored = np.round(depth_m * 256.0)
    if np.any(stored < 0.0) or np.any(stored > 65535.0):
        bad = depth_m.flat[int(np.argmax((stored < 0) | (stored > 65535)))]
        raise FormatError(f"depth {bad:g} m outside the storable range [0, 255.996]")
    write_png_u16(path, stored.astype(np.uint16))


def read_depth_png(path: str | Path):
    """Return (depth_m, present) where present marks nonzero stored pixels."""
    stored = read_png_u16(path)
    return stored.astype(np.float64) / 256.0, stored != 0


def write_png_u16(path: str | Path, grid: Array) -> None:
    grid = np.ascontiguousarray(grid, dtype=np.uint16)
    if grid.ndim != 2:
        raise FormatError(f"expected a 2-D grid, got shape {grid.shape}")
    img = Image.fromarray(grid)  # uint16 maps to 16-bit grayscale ("I;16")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png_u16(path: str | Path) -> Array:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as e:
        raise FormatError(f"not a readable PNG: {path} ({e})") from None
    if img.mode not in ("I;16", "I;16B", "I"):
        raise FormatError(
            f"expected a single-channel 16-bit PNG, got mode '{img.mode}': {path}")
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise FormatError(f"expected a single channel, got shape {arr.shape}: {path}")
    if arr.dtype != np.uint16:
        if np.any(arr < 0) or np.any(arr > 65535):
            raise FormatError(f"pixel values outside uint16 range: {path}")
        arr = arr.astype(np.uint16)
    return arr


# ---------------------------------------------------------------------------
# raw grid blobs
# ---------------------------------------------------------------------------

def grid_to_bytes(grid: Array) -> bytes:
    grid = np.ascontiguousarray(grid)
    if grid.ndim != 2:
        raise FormatError(f"grid blobs are 2-D, got shape {grid.shape}")
    code = _CODES.get(grid.dtype)
    if code is None:
        raise FormatError(f"unsupported grid dtype {grid.dtype}")
    rows, cols = grid.shape
    header = GRID_MAGIC + code + struct.pack("<II", rows, cols)
    return header + grid.astype(_DTYPES[code], copy=False).tobytes()


def grid_from_bytes(blob: bytes, offset: int = 0):
    """Decode one grid blob; returns (array, bytes consumed)."""
    head = blob[offset:offset + 16]
    if len(head) < 16 or head[:5] != GRID_MAGIC:
        raise FormatError("bad grid header (magic mismatch or truncated)")
    code = head[5:8]
    if code not in _DTYPES:
        raise FormatError(f"unknown grid dtype code {code!r}")
    rows, cols = struct.unpack("<II", head[8:16])
    dt = _DTYPES[code]
    nbytes = rows * cols * dt.itemsize
    payload = blob[offset + 16:offset + 16 + nbytes]
    if len(payload) != nbytes:
        raise FormatError(
            f"grid payload truncated: expected {nbytes} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).reshape(rows, cols)
    return arr.astype(dt.newbyteorder("=")), 16 + nbytes


def write_grid(path: str | Path, grid: Array) -> None:
    atomic_write_bytes(path, grid_to_bytes(grid))


def read_grid(path: str | Path) -> Array:
    blob = Path(path).read_bytes()
    arr, used = grid_from_bytes(blob)
    if used != len(blob):
        raise FormatError(f"trailing bytes after grid payload: {path}")
    return arr


# ---------------------------------------------------------------------------
# flat key=value configs
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def write_config(path: str | Path, items: dict) -> None:
    text = "".join(f"{k}={v}\n" for k, v in items.items())
    atomic_write_bytes(path, text.encode())


def format_ncnn_layers(layers) -> str:
    """Tokens like 5p,5,3,3u: kernel size plus optional pool/unpool flag."""
    suffix = {"": "", "pool": "p", "unpool": "u"}
    return ",".join(f"{k}{suffix[flag]}" for k, flag in layers)


def parse_ncnn_layers(text: str):
    layers = []
    for token in text.split(","):
        token = token.strip()
        flag = ""
        if token.endswith("p"):
            flag, token = "pool", token[:-1]
        elif token.endswith("u"):
            flag, token = "unpool", token[:-1]
        layers.append((int(token), flag))
    return tuple(layers)


def pipeline_config_items(cfg: PipelineConfig) -> dict[str, str]:
    return {
        "variant": cfg.variant,
        "unet_channels": ",".join(str(c) for c in cfg.unet_channels),
        "ncnn_layers": format_ncnn_layers(cfg.ncnn_layers),
        "eps": repr(cfg.eps),
        "s_min": repr(cfg.s_min),
        "a_min": repr(cfg.a_min),
        "with_depth_pred": str(int(cfg.with_depth_pred)),
        "input_scale": repr(cfg.input_scale),
    }


def pipeline_config_from_items(items: dict[str, str]) -> PipelineConfig:
    return PipelineConfig(
        variant=items["variant"],
        unet_channels=tuple(int(c) for c in items["unet_channels"].split(",")),
        ncnn_layers=parse_ncnn_layers(items["ncnn_layers"]),
        eps=float(items["eps"]),
        s_min=float(items["s_min"]),
        a_min=float(items["a_min"]),
        with_depth_pred=bool(int(items.get("with_depth_pred", "0"))),
        input_scale=float(items.get("input_scale", "1.0")),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(pipeline: Pipeline, path: str | Path) -> None:
    lines = [CHECKPOINT_MAGIC]
    for key, value in pipeline_config_items(pipeline.cfg).items():
        lines.append(f"cfg {key}={value}")
    names = pipeline.param_names()
    for name in names:
        shape = "x".join(str(d) for d in pipeline.params[name].shape)
        lines.append(f"param {name} {shape}")
    lines.append("data")
    blobs = b"".join(
        grid_to_bytes(pipeline.params[name].reshape(1, -1)) for name in names)
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode() + blobs)


def load_checkpoint(path: str | Path) -> Pipeline:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0 or blob[:nl].decode(errors="replace") != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"not a supported checkpoint (expected {CHECKPOINT_MAGIC} header): {path}")
    cfg_items: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    pos = nl + 1
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"truncated checkpoint manifest: {path}")
        line = blob[pos:nl].decode(errors="replace")
        pos = nl + 1
        if line == "data":
            break
        if line.startswith("cfg "):
            key, value = line[4:].split("=", 1)
            cfg_items[key] = value
        elif line.startswith("param "):
            _, name, shape = line.split(" ")
            shapes.append((name, tuple(int(d) for d in shape.split("x"))))
        else:
            raise CheckpointError(f"unrecognized manifest line {line!r}: {path}")
    try:
        cfg = pipeline_config_from_items(cfg_items)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"bad checkpoint config ({e}): {path}") from None
    params: dict[str, Array] = {}
    for name, shape in shapes:
        try:
            arr, used = grid_from_bytes(blob, pos)
        except FormatError as e:
            raise CheckpointError(f"bad parameter blob for '{name}' ({e}): {path}") from None
        pos += used
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(
                f"parameter '{name}' size mismatch ({arr.size} vs shape {shape}): {path}")
        params[name] = np.ascontiguousarray(arr, dtype=np.float64).reshape(shape)
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes after parameter blobs: {path}")
    return Pipeline(cfg, params)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def save_dataset(samples: list[Sample], out_dir: str | Path, meta: dict | None = None) -> None:
    out = Path(out_dir)
    for sub in ("sparse", "gt", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        write_depth_png(out / "sparse" / f"{stem}.png", s.sparse)
        write_depth_png(out / "gt" / f"{stem}.png", s.gt)
        write_grid(out / "mask" / f"{stem}.cgrd", s.outlier_mask.astype(np.uint16))
    items = {"n_images": str(len(samples))}
    if meta:
        items.update({k: str(v) for k, v in meta.items()})
    write_config(out / "meta.cfg", items)


def load_dataset(dir_path: str | Path) -> list[Sample]:
    root = Path(dir_path)
    sparse_dir = root / "sparse"
    gt_dir = root / "gt"
    if not sparse_dir.is_dir() or not gt_dir.is_dir():
        raise FormatError(f"dataset directory needs sparse/ and gt/: {root}")
    samples = []
    for spath in sorted(sparse_dir.glob("*.png")):
        gpath = gt_dir / spath.name
        if not gpath.exists():
            raise FormatError(f"missing groundtruth for {spath.name}")
        sparse, _ = read_depth_png(spath)
        gt, _ = read_depth_png(gpath)
        mpath = root / "mask" / (spath.stem + ".cgrd")
        mask = (read_grid(mpath).astype(bool) if mpath.exists()
                else np.zeros(gt.shape, dtype=bool))
        samples.append(Sample(sparse=sparse, gt=gt, outlier_mask=mask))
    if not samples:
        raise FormatError(f"no samples found under {root}")
    return samples
