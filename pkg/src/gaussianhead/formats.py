"""On-disk formats: PLY clouds, feature/audio binaries, prior-mesh text,
checkpoints, PNG images, and metric CSVs.

All binary formats are little-endian and carry a magic plus version;
readers reject unknown versions. Save/load round-trips are bitwise exact
(float64 payloads everywhere).
"""
from __future__ import annotations

import csv
import struct
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .core import GaussianCloud
from .motion import AudioFeatureTrack
from .reconstruction import PriorMesh, REGIONS


class FormatError(ValueError):
    """Raised for malformed or unsupported files."""


MAGIC_LOCAL = b"GHFL"
MAGIC_GLOBAL = b"GHFG"
MAGIC_AUDIO = b"GHAU"
MAGIC_CHECKPOINT = b"GHCK"
MAGIC_FEATURE_IMAGE = 0x47464931  # 'GFI1'
FORMAT_VERSION = 1


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("unexpected end of file")
    return data


def _check_header(f, magic: bytes):
    if _read_exact(f, 4) != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")


# ----------------------------------------------------------------------- PLY

_PLY_TYPES = {"float": ("<f4", 4), "double": ("<f8", 8), "uchar": ("<u1", 1)}


def cloud_property_names(feat_dim: int):
    names = ["x", "y", "z"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += ["opacity"]
    names += [f"f_{i}" for i in range(feat_dim)]
    return names


def save_ply(cloud: GaussianCloud, path):
    """Binary little-endian PLY; log-scales and logit opacity stored raw."""
    z = cloud.feat_dim
    names = cloud_property_names(z)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header += ["property uchar branch", "end_header"]
    cols = np.concatenate([cloud.mu, cloud.scale_log, cloud.rot,
                           cloud.opacity_logit[:, None], cloud.feat], axis=1)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        row_t = np.dtype([(n, "<f8") for n in names] + [("branch", "<u1")])
        rows = np.empty(len(cloud), dtype=row_t)
        for i, n in enumerate(names):
            rows[n] = cols[:, i]
        rows["branch"] = cloud.branch_tag
        f.write(rows.tobytes())


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise FormatError("not a PLY file")
        fmt = f.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise FormatError(f"unsupported PLY format line: {fmt!r}")
        n = None
        props = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError("truncated PLY header")
            line = line.strip().decode("ascii")
            if line == "end_header":
                break
            if line.startswith("comment"):
                continue
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("element"):
                raise FormatError(f"unsupported element: {line}")
            elif line.startswith("property"):
                _, ptype, pname = line.split()
                if ptype not in _PLY_TYPES:
                    raise FormatError(f"unsupported property type {ptype}")
                props.append((pname, ptype))
        if n is None:
            raise FormatError("missing vertex element")
        row_t = np.dtype([(pname, _PLY_TYPES[ptype][0]) for pname, ptype in props])
        rows = np.frombuffer(_read_exact(f, row_t.itemsize * n), dtype=row_t)

    have = {pname for pname, _ in props}
    feat_names = sorted((p for p in have if p.startswith("f_")),
                        key=lambda s: int(s[2:]))
    expected = set(cloud_property_names(len(feat_names))) | {"branch"}
    unknown = have - expected
    if unknown:
        raise FormatError(f"unknown PLY properties: {sorted(unknown)}")
    missing = expected - have - {"branch"}
    if missing:
        raise FormatError(f"missing PLY properties: {sorted(missing)}")

    def col(name):
        return np.asarray(rows[name], dtype=np.float64)

    if "branch" in have:
        branch = np.asarray(rows["branch"], dtype=np.uint8)
    else:
        warnings.warn("PLY has no 'branch' property; importing as all-visible")
        branch = np.zeros(n, dtype=np.uint8)
    return GaussianCloud(
        mu=np.stack([col("x"), col("y"), col("z")], axis=1),
        scale_log=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        rot=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        opacity_logit=col("opacity"),
        feat=np.stack([col(f) for f in feat_names], axis=1)
        if feat_names else np.zeros((n, 0)),
        branch_tag=branch,
    )


# ------------------------------------------------------------- feature files

def save_local_features(feat: np.ndarray, path):
    feat = np.ascontiguousarray(feat, dtype=np.float64)
    h, w, c = feat.shape
    with open(path, "wb") as f:
        f.write(MAGIC_LOCAL)
        f.write(struct.pack("<IIII", FORMAT_VERSION, h, w, c))
        f.write(feat.tobytes())


def load_local_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_header(f, MAGIC_LOCAL)
        h, w, c = struct.unpack("<III", _read_exact(f, 12))
        data = np.frombuffer(_read_exact(f, 8 * h * w * c), dtype="<f8")
    return data.reshape(h, w, c).copy()


def save_global_features(feat: np.ndarray, path):
    feat = np.ascontiguousarray(feat, dtype=np.float64).ravel()
    with open(path, "wb") as f:
        f.write(MAGIC_GLOBAL)
        f.write(struct.pack("<II", FORMAT_VERSION, feat.size))
        f.write(feat.tobytes())


def load_global_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_header(f, MAGIC_GLOBAL)
        (c,) = struct.unpack("<I", _read_exact(f, 4))
        data = np.frombuffer(_read_exact(f, 8 * c), dtype="<f8")
    return data.copy()


def save_audio_track(track: AudioFeatureTrack, path):
    from fractions import Fraction
    rate = Fraction(track.frame_rate).limit_denominator(1 << 20)
    frames = np.ascontiguousarray(track.frames, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(MAGIC_AUDIO)
        f.write(struct.pack("<IIIII", FORMAT_VERSION, frames.shape[0],
                            frames.shape[1], rate.numerator, rate.denominator))
        f.write(frames.tobytes())


def load_audio_track(path) -> AudioFeatureTrack:
    with open(path, "rb") as f:
        _check_header(f, MAGIC_AUDIO)
        n, d, num, den = struct.unpack("<IIII", _read_exact(f, 16))
        data = np.frombuffer(_read_exact(f, 8 * n * d), dtype="<f8")
    return AudioFeatureTrack(frames=data.reshape(n, d).copy(),
                             frame_rate=num / den)


def save_feature_image(data: np.ndarray, path):
    """Debug dump of a raw render target: 16-byte header + float64 payload."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    h, w, z = data.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<IIII", MAGIC_FEATURE_IMAGE, w, h, z))
        f.write(data.tobytes())


def load_feature_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, z = struct.unpack("<IIII", _read_exact(f, 16))
        if magic != MAGIC_FEATURE_IMAGE:
            raise FormatError("bad feature-image magic")
        data = np.frombuffer(_read_exact(f, 8 * h * w * z), dtype="<f8")
    return data.reshape(h, w, z).copy()


# ------------------------------------------------------------ prior mesh text

def save_priormesh(prior: PriorMesh, path):
    lines = [f"priormesh v1 {prior.vertices.shape[0]}"]
    for v, r in zip(prior.vertices, prior.regions):
        lines.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r} {r}")
    lines.append("landmarks: " + " ".join(str(i) for i in prior.landmarks))
    lines.append("lip: " + " ".join(str(i) for i in prior.lip_indices))
    Path(path).write_text("\n".join(lines) + "\n")


def load_priormesh(path) -> PriorMesh:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != "priormesh" or head[1] != "v1":
        raise FormatError(f"bad priormesh header: {lines[0]!r}")
    v = int(head[2])
    verts = np.empty((v, 3))
    regions = []
    for i in range(v):
        parts = lines[1 + i].split()
        verts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
        if parts[3] not in REGIONS:
            raise FormatError(f"unknown region {parts[3]!r} on line {i + 2}")
        regions.append(parts[3])
    def tail(prefix, line):
        if not line.startswith(prefix):
            raise FormatError(f"expected {prefix!r} line")
        return np.array([int(s) for s in line[len(prefix):].split()], dtype=np.int64)
    landmarks = tail("landmarks:", lines[1 + v])
    lip = tail("lip:", lines[2 + v])
    return PriorMesh(vertices=verts, regions=regions, landmarks=landmarks,
                     lip_indices=lip)


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, stage: int, iteration: int, tensors: dict,
                    config_text: str = ""):
    """Length-prefixed named-tensor container."""
    with open(path, "wb") as f:
        f.write(MAGIC_CHECKPOINT)
        f.write(struct.pack("<IBQ", FORMAT_VERSION, stage, iteration))
        cfg = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(tensors)))
        for name in tensors:  # dict order is the save order; stable round-trips
            # np.array rather than ascontiguousarray: the latter promotes
            # 0-d scalars to shape (1,), breaking round trips
            arr = np.array(tensors[name], dtype=np.float64, order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (stage, iteration, tensors dict, config_text)."""
    with open(path, "rb") as f:
        _check_header(f, MAGIC_CHECKPOINT)
        stage, iteration = struct.unpack("<BQ", _read_exact(f, 9))
        (clen,) = struct.unpack("<I", _read_exact(f, 4))
        config_text = _read_exact(f, clen).decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 8 * size), dtype="<f8")
            tensors[name] = data.reshape(shape).copy()
    return stage, iteration, tensors, config_text


# ----------------------------------------------------------------- PNG / CSV

def save_png(img: np.ndarray, path):
    """Write an (H, W, 3) float [0,1] image as 8-bit PNG (sRGB-naive)."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_metrics_csv(rows, path):
    """rows: iterable of (frame, psnr_db, ssim, lmd_px); lmd may be None."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "psnr_db", "ssim", "lmd_px"])
        for frame, p, s, l in rows:
            w.writerow([frame, f"{p:.6f}", f"{s:.6f}",
                        "" if l is None else f"{l:.6f}"])


# -------------------------------------------------------------- scene bundles

def _camera_line(cam) -> str:
    vals = list(cam.rotation.ravel()) + list(cam.translation) + [
        cam.fx, cam.fy, cam.cx, cam.cy, float(cam.image_w), float(cam.image_h),
        cam.near, cam.far]
    return " ".join(repr(float(v)) for v in vals)


def _camera_from_line(line: str):
    from .core import CameraPose
    v = [float(s) for s in line.split()]
    if len(v) != 20:
        raise FormatError("camera line must have 20 fields")
    return CameraPose(rotation=np.array(v[:9]).reshape(3, 3),
                      translation=np.array(v[9:12]), fx=v[12], fy=v[13],
                      cx=v[14], cy=v[15], image_w=int(v[16]), image_h=int(v[17]),
                      near=v[18], far=v[19])


def save_bundle(bundle, out_dir):
    """Write a SceneBundle to a directory with a manifest.ini index."""
    import configparser
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "priors").mkdir(exist_ok=True)
    for i, frame in enumerate(bundle.frames):
        save_png(frame, out / "frames" / f"frame_{i:04d}.png")
    for i, prior in enumerate(bundle.priors):
        save_priormesh(prior, out / "priors" / f"prior_{i:04d}.txt")
    with open(out / "cameras.txt", "w") as f:
        for cam in bundle.cameras:
            f.write(_camera_line(cam) + "\n")
    save_local_features(bundle.f_local, out / "local_features.bin")
    save_global_features(bundle.f_global, out / "global_features.bin")
    if bundle.audio is not None:
        save_audio_track(bundle.audio, out / "audio.bin")
    with open(out / "curve.txt", "w") as f:
        for v in bundle.driving_curve:
            f.write(repr(float(v)) + "\n")

    cfg = configparser.ConfigParser()
    p = bundle.preset
    cfg["scene"] = {
        "preset": p.name, "seed": str(bundle.seed),
        "n_frames": str(bundle.n_frames), "resolution": str(p.resolution),
        "source_index": str(bundle.source_index),
        "aperture_amp": repr(p.aperture_amp),
        "rest_aperture": repr(p.rest_aperture),
        "aperture_cycles": repr(p.aperture_cycles),
        "audio_dim": str(p.audio_dim), "frame_rate": repr(p.frame_rate),
        "local_resolution": str(p.local_resolution),
        "local_channels": str(p.local_channels),
        "global_channels": str(p.global_channels),
        "n_other_vertices": str(p.n_other_vertices),
        "camera_distance": repr(p.camera_distance),
        "has_audio": str(bundle.audio is not None),
    }
    with open(out / "manifest.ini", "w") as f:
        cfg.write(f)


def load_bundle(bundle_dir):
    """Load a SceneBundle saved by save_bundle."""
    import configparser
    from .synthetic import SceneBundle, ScenePreset
    root = Path(bundle_dir)
    cfg = configparser.ConfigParser()
    if not cfg.read(root / "manifest.ini"):
        raise FormatError(f"no manifest.ini in {bundle_dir}")
    s = cfg["scene"]
    preset = ScenePreset(
        name=s["preset"], resolution=s.getint("resolution"),
        n_frames=s.getint("n_frames"),
        camera_distance=s.getfloat("camera_distance"),
        aperture_amp=s.getfloat("aperture_amp"),
        rest_aperture=s.getfloat("rest_aperture"),
        aperture_cycles=s.getfloat("aperture_cycles"),
        audio_dim=s.getint("audio_dim"), frame_rate=s.getfloat("frame_rate"),
        local_resolution=s.getint("local_resolution"),
        local_channels=s.getint("local_channels"),
        global_channels=s.getint("global_channels"),
        n_other_vertices=s.getint("n_other_vertices"))
    n = preset.n_frames
    frames = [load_png(root / "frames" / f"frame_{i:04d}.png") for i in range(n)]
    priors = [load_priormesh(root / "priors" / f"prior_{i:04d}.txt") for i in range(n)]
    with open(root / "cameras.txt") as f:
        cameras = [_camera_from_line(line) for line in f if line.strip()]
    curve = np.array([float(line) for line in
                      (root / "curve.txt").read_text().splitlines() if line.strip()])
    audio = load_audio_track(root / "audio.bin") if s.getboolean("has_audio") else None
    return SceneBundle(preset=preset, seed=s.getint("seed"), frames=frames,
                       cameras=cameras, priors=priors,
                       f_local=load_local_features(root / "local_features.bin"),
                       f_global=load_global_features(root / "global_features.bin"),
                       audio=audio, driving_curve=curve,
                       source_index=s.getint("source_index"))
