"""File formats: camera text, PFM depth maps, PLY clouds, weight bundles, configs.

Weight bundle layout (all integers little-endian)::

    magic      4 bytes  b"EPWB"
    version    uint32   1
    arch       uint32 length + UTF-8 bytes   ("fpn" or "unet-g<G>")
    count      uint32   number of layers
    per layer  uint16 name length + UTF-8 name
               uint8 flags (1 = bias present, 2 = batch-norm stats present)
               uint8 ndim, then ndim x uint32 kernel shape (out, in, k...)
               float32 batch-norm eps (only when flag 2 is set)
    payload    float32 arrays, layer by layer: weight, [bias], [gamma, beta, mean, var]
    crc32      uint32 over every preceding byte
"""

from __future__ import annotations

import os
import re
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, UsageError
from .features import FPN_LAYERS, LOADED, WeightBundle
from .fusion import PointCloud
from .geometry import CameraModel

# --- cameras -----------------------------------------------------------------


def format_camera(cam: CameraModel, d_min: float, d_interval: float = 0.0) -> str:
    lines = ["extrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.extrinsic]
    lines += ["", "intrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.K]
    lines += ["", f"{float(d_min)!r} {float(d_interval)!r}", ""]
    return "\n".join(lines)


def write_camera(path, cam: CameraModel, d_min: float, d_interval: float = 0.0) -> None:
    Path(path).write_text(format_camera(cam, d_min, d_interval), encoding="utf-8")


def parse_camera(text: str, width: int, height: int):
    """Parse MVSNet-style camera text.

    Returns:
        (CameraModel, d_min, d_interval)
    """
    tokens = text.split()
    try:
        e = tokens.index("extrinsic")
        i = tokens.index("intrinsic")
        E = np.array([float(t) for t in tokens[e + 1 : e + 17]]).reshape(4, 4)
        K = np.array([float(t) for t in tokens[i + 1 : i + 10]]).reshape(3, 3)
        rest = tokens[i + 10 :]
        d_min, d_interval = float(rest[0]), float(rest[1]) if len(rest) > 1 else 0.0
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed camera file: {exc}") from None
    if not np.allclose(E[3], [0, 0, 0, 1]):
        raise FormatError("extrinsic bottom row must be 0 0 0 1")
    return CameraModel(K, E[:3, :3], E[:3, 3], width, height), d_min, d_interval


def read_camera(path, width: int, height: int):
    return parse_camera(Path(path).read_text(encoding="utf-8"), width, height)


# --- PFM ---------------------------------------------------------------------


def encode_pfm(depth: np.ndarray) -> bytes:
    d = np.asarray(depth)
    if d.ndim != 2:
        raise UsageError("PFM depth maps must be 2-D")
    d32 = d.astype("<f4")
    if not np.all(np.isfinite(d32)):
        raise UsageError("PFM writer requires a finite depth map")
    H, W = d32.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(d32[::-1]).tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    pos = 0
    lines = []
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated PFM header", pos)
        lines.append((data[pos:end], pos))
        pos = end + 1
    (magic, off0), (dims, off1), (scale, off2) = lines
    if magic == b"PF":
        raise FormatError("colour PFM ('PF') is not a depth map; expected 'Pf'", off0)
    if magic != b"Pf":
        raise FormatError(f"bad PFM magic {magic[:8]!r}", off0)
    m = re.fullmatch(rb"\s*(\d+)\s+(\d+)\s*", dims)
    if not m:
        raise FormatError("bad PFM dimensions line", off1)
    W, H = int(m.group(1)), int(m.group(2))
    try:
        s = float(scale)
    except ValueError:
        raise FormatError("bad PFM scale line", off2) from None
    if s == 0:
        raise FormatError("PFM scale must be non-zero", off2)
    need = W * H * 4
    if len(data) - pos < need:
        raise FormatError(f"truncated PFM payload: need {need} bytes, have {len(data) - pos}", len(data))
    dtype = "<f4" if s < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=W * H, offset=pos).reshape(H, W)
    return arr[::-1].astype(np.float32)


def write_pfm(path, depth: np.ndarray) -> None:
    Path(path).write_bytes(encode_pfm(depth))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


# --- PLY ---------------------------------------------------------------------


def encode_ply(cloud: PointCloud, binary: bool = True) -> bytes:
    pts = cloud.points.astype("<f4")
    has_color = cloud.colors is not None
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        fields_ = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if has_color:
            fields_ += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        rec = np.empty(len(pts), dtype=fields_)
        rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        if has_color:
            rec["red"], rec["green"], rec["blue"] = cloud.colors[:, 0], cloud.colors[:, 1], cloud.colors[:, 2]
        return head + rec.tobytes()
    rows = []
    for k, p in enumerate(pts):
        row = " ".join(f"{float(v):.9g}" for v in p)
        if has_color:
            row += " " + " ".join(str(int(c)) for c in cloud.colors[k])
        rows.append(row)
    return head + ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")


def decode_ply(data: bytes) -> PointCloud:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' magic or end_header)", 0)
    body = end + len(b"end_header\n")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, count, props = None, None, []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex" or count is not None:
                raise FormatError(f"unsupported element {parts[1]!r}", 0)
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[2], parts[1]))
    names = [p[0] for p in props]
    if fmt not in ("ascii", "binary_little_endian") or count is None or names[:3] != ["x", "y", "z"]:
        raise FormatError("unsupported PLY layout", 0)
    has_color = names[3:] == ["red", "green", "blue"]
    if len(names) not in (3, 6) or (len(names) == 6 and not has_color):
        raise FormatError(f"unsupported PLY properties {names}", 0)
    if fmt == "binary_little_endian":
        dt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + ([("red", "u1"), ("green", "u1"), ("blue", "u1")] if has_color else [])
        dt = np.dtype(dt)
        if len(data) - body < count * dt.itemsize:
            raise FormatError("truncated PLY payload", len(data))
        rec = np.frombuffer(data, dtype=dt, count=count, offset=body)
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1)
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1) if has_color else None
    else:
        lines = data[body:].decode("ascii").split("\n")[:count]
        if len(lines) < count:
            raise FormatError("truncated PLY payload", len(data))
        vals = [ln.split() for ln in lines]
        pts = np.array([[float(v) for v in row[:3]] for row in vals], dtype=np.float32).reshape(-1, 3)
        cols = np.array([[int(v) for v in row[3:6]] for row in vals], dtype=np.uint8).reshape(-1, 3) if has_color else None
    return PointCloud(pts.astype(np.float64), cols)


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    Path(path).write_bytes(encode_ply(cloud, binary))


def read_ply(path) -> PointCloud:
    return decode_ply(Path(path).read_bytes())


# --- weight bundles ------------------------------------------------------------

_MAGIC = b"EPWB"
_VERSION = 1


def encode_weight_bundle(raw_layers: dict, arch: str = "fpn") -> bytes:
    """Serialise raw layer records (see :meth:`WeightBundle.from_raw`)."""
    head = bytearray(_MAGIC)
    head += struct.pack("<I", _VERSION)
    tag = arch.encode("utf-8")
    head += struct.pack("<I", len(tag)) + tag
    head += struct.pack("<I", len(raw_layers))
    payload = bytearray()
    for name, rec in raw_layers.items():
        w = np.asarray(rec["weight"])
        flags = (1 if rec.get("bias") is not None else 0) | (2 if rec.get("gamma") is not None else 0)
        nb = name.encode("utf-8")
        head += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", flags, w.ndim)
        head += struct.pack(f"<{w.ndim}I", *w.shape)
        if flags & 2:
            head += struct.pack("<f", rec.get("eps", 1e-5))
        payload += w.astype("<f4").tobytes()
        if flags & 1:
            payload += np.asarray(rec["bias"]).astype("<f4").tobytes()
        if flags & 2:
            for key in ("gamma", "beta", "mean", "var"):
                payload += np.asarray(rec[key]).astype("<f4").tobytes()
    body = bytes(head + payload)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weight_bundle(data: bytes):
    """Parse a bundle; returns ``(arch, raw_layers)`` with float32 arrays."""
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FormatError("bad weight bundle magic", 0)
    if len(data) < 8:
        raise FormatError("truncated weight bundle header", len(data))
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("weight bundle checksum mismatch", len(data) - 4)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise FormatError("truncated weight bundle", pos)
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != _VERSION:
        raise FormatError(f"unsupported weight bundle version {version}", 4)
    (n,) = take("<I")
    arch = bytes(take(f"<{n}s")[0]).decode("utf-8")
    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (ln,) = take("<H")
        name = take(f"<{ln}s")[0].decode("utf-8")
        flags, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        eps = take("<f")[0] if flags & 2 else None
        entries.append((name, flags, shape, eps))
    raw = {}
    for name, flags, shape, eps in entries:
        size = int(np.prod(shape))
        out_ch = shape[0]

        def arr(n_items, shp):
            nonlocal pos
            if pos + 4 * n_items > len(body):
                raise FormatError(f"truncated payload in layer {name!r}", pos)
            a = np.frombuffer(body, dtype="<f4", count=n_items, offset=pos).reshape(shp).astype(np.float32)
            pos += 4 * n_items
            return a

        rec = {"weight": arr(size, shape)}
        if flags & 1:
            rec["bias"] = arr(out_ch, (out_ch,))
        if flags & 2:
            for key in ("gamma", "beta", "mean", "var"):
                rec[key] = arr(out_ch, (out_ch,))
            rec["eps"] = float(eps)
        raw[name] = rec
    if pos != len(body):
        raise FormatError("trailing bytes after weight payload", pos)
    return arch, raw


def arch_specs(arch: str):
    if arch == "fpn":
        return FPN_LAYERS
    m = re.fullmatch(r"unet-g(\d+)", arch)
    if m:
        from .regularizer import unet_layers

        return unet_layers(int(m.group(1)))
    raise FormatError(f"unknown architecture tag {arch!r}")


def write_weight_bundle(path, raw_layers: dict, arch: str = "fpn") -> None:
    Path(path).write_bytes(encode_weight_bundle(raw_layers, arch))


def load_weight_bundle(path) -> WeightBundle:
    arch, raw = decode_weight_bundle(Path(path).read_bytes())
    return WeightBundle.from_raw(raw, provenance=LOADED, specs=arch_specs(arch))


# --- flat key/value text -------------------------------------------------------


def parse_kv(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {n}: empty key")
        out[key] = value
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(format_value(x.item() if isinstance(x, np.generic) else x) for x in v)
    return str(v)


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def read_kv(path) -> dict:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def write_kv(path, values: dict) -> None:
    Path(path).write_text(format_kv(values), encoding="utf-8")


def scene_to_kv(spec) -> dict:
    """Flatten a :class:`~epimvs.synth.SceneSpec` (primitives become ``plane<i>.*`` keys)."""
    out = {}
    for f in fields(spec):
        if f.name in ("planes", "spheres"):
            continue
        out[f.name] = getattr(spec, f.name)
    for i, p in enumerate(spec.planes):
        for f in fields(p):
            out[f"plane{i}.{f.name}"] = getattr(p, f.name)
    for i, s in enumerate(spec.spheres):
        for f in fields(s):
            out[f"sphere{i}.{f.name}"] = getattr(s, f.name)
    return out


def scene_from_kv(values: dict):
    from . import synth

    def conv(raw, default):
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw

    prims = {"plane": {}, "sphere": {}}
    top = {}
    base = synth.SceneSpec()
    for key, raw in values.items():
        m = re.fullmatch(r"(plane|sphere)(\d+)\.(\w+)", key)
        if m:
            prims[m.group(1)].setdefault(int(m.group(2)), {})[m.group(3)] = raw
        elif hasattr(base, key) and key not in ("planes", "spheres"):
            top[key] = conv(raw, getattr(base, key)) if isinstance(raw, str) else raw
        else:
            raise ConfigurationError(f"unknown scene key {key!r}")

    def build(cls, recs, required):
        items = []
        for idx in sorted(recs):
            rec = recs[idx]
            missing = [r for r in required if r not in rec]
            if missing:
                raise ConfigurationError(f"{cls.__name__.lower()}{idx} lacks {missing}")
            kw = {}
            for f in fields(cls):
                if f.name in rec:
                    raw = rec[f.name]
                    if not isinstance(raw, str):
                        kw[f.name] = raw
                    elif f.name == "seed":
                        kw[f.name] = int(raw)
                    elif f.name == "radius":
                        kw[f.name] = float(raw)
                    else:
                        kw[f.name] = tuple(float(x) for x in raw.split())
            items.append(cls(**kw))
        return tuple(items)

    planes = build(synth.Plane, prims["plane"], ("center", "normal"))
    spheres = build(synth.Sphere, prims["sphere"], ("center", "radius"))
    return synth.SceneSpec(planes=planes, spheres=spheres, **top)


# --- run manifest -------------------------------------------------------------

FORMAT_TAG = "epimvs-run/1"


@dataclass
class RunManifest:
    command: str
    inputs: list = field(default_factory=list)
    config_path: str = ""
    output_dir: str = ""
    artifacts: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    format_tag: str = FORMAT_TAG

    def check_inputs(self) -> None:
        """Abort before writing anything if a referenced input is missing."""
        for p in list(self.inputs) + ([self.config_path] if self.config_path else []):
            if not os.path.exists(p):
                raise UsageError(f"input does not exist: {p}")

    def to_kv(self) -> dict:
        out = {
            "format": self.format_tag,
            "command": self.command,
            "inputs": " ".join(self.inputs),
            "config_path": self.config_path,
            "output_dir": self.output_dir,
            "artifacts": " ".join(self.artifacts),
        }
        for k, v in self.config.items():
            out[f"config.{k}"] = v
        return out

    def write(self, path) -> None:
        write_kv(path, self.to_kv())
