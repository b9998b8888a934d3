"""Procedural head scenes with exact ground truth.

The head is a textured ellipsoid (smooth shaded skin, eye patches, lips,
and a mouth interior with a teeth band) rendered analytically by per-pixel
ray casting. The mouth rests half-open in both presets, so the interior is
supervised during static multi-view training; the talking preset swings
the lower lip around that rest pose by a known scalar aperture curve that
starts exactly at the rest aperture. The same curve generates the audio
feature track, so lip-sync quality can be verified against exact ground
truth. The teeth band is fixed in world space (like teeth in a skull) and
is progressively covered or revealed by the moving lower lip, so a purely
geometric lip motion reproduces the appearance change exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import CameraPose
from .motion import AudioFeatureTrack, synthetic_audio_embedding
from .reconstruction import (PriorMesh, REGION_EYE, REGION_MOUTH, REGION_OTHER,
                             extract_global_features, extract_local_features)

HEAD_RADII = np.array([0.62, 0.85, 0.65])
MOUTH_Y = -0.32
LIP_H = 0.045
MOUTH_HALF_W = 0.22
TEETH_BAND = 0.088      # world-space teeth height below MOUTH_Y, aperture-independent
EYE_CENTERS = ((-0.24, 0.30), (0.24, 0.30))
EYE_RX, EYE_RY = 0.10, 0.055
LIGHT_DIR = np.array([0.35, 0.45, 0.82]) / np.linalg.norm([0.35, 0.45, 0.82])

SKIN = np.array([0.80, 0.62, 0.52])
IRIS = np.array([0.25, 0.17, 0.12])
PUPIL = np.array([0.05, 0.05, 0.06])
LIP_UPPER = np.array([0.55, 0.25, 0.25])
LIP_LOWER = np.array([0.50, 0.22, 0.22])
TEETH = np.array([0.93, 0.92, 0.88])
CAVITY = np.array([0.08, 0.05, 0.05])


@dataclass
class ScenePreset:
    name: str = "static-head"          # or "talking-head"
    resolution: int = 64
    n_frames: int = 8
    camera_distance: float = 2.6
    aperture_amp: float = 0.16         # maximum jaw aperture
    rest_aperture: float = 0.09        # aperture of the static scene and source frame
    aperture_cycles: float = 2.0
    audio_dim: int = 32
    frame_rate: float = 25.0
    local_resolution: int = 64         # feature-map side, matches plane P
    local_channels: int = 64
    global_channels: int = 64
    n_other_vertices: int = 700


@dataclass
class SceneBundle:
    """In-memory dataset: frames, cameras, per-frame priors, features, audio."""

    preset: ScenePreset
    seed: int
    frames: list                        # (H, W, 3) float arrays, PNG-quantized
    cameras: list                       # CameraPose per frame
    priors: list                        # PriorMesh per frame
    f_local: np.ndarray                 # source local feature map
    f_global: np.ndarray                # source global feature vector
    audio: AudioFeatureTrack | None
    driving_curve: np.ndarray           # aperture per frame
    source_index: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def ellipsoid_front_z(x, y, radii=HEAD_RADII) -> np.ndarray:
    """Front-sheet z of the head ellipsoid; 0 outside its silhouette."""
    t = 1.0 - (np.asarray(x) / radii[0]) ** 2 - (np.asarray(y) / radii[1]) ** 2
    return radii[2] * np.sqrt(np.maximum(t, 0.0))


def _mouth_extent(y: np.ndarray, aperture: float) -> np.ndarray:
    """Half-width of the mouth shape at height y (rounded box)."""
    yc = MOUTH_Y - aperture / 2.0
    yr = aperture / 2.0 + LIP_H + 0.01
    t = 1.0 - ((y - yc) / yr) ** 2
    return MOUTH_HALF_W * np.sqrt(np.maximum(t, 0.0))


def surface_color(pts: np.ndarray, normals: np.ndarray,
                  aperture: float) -> np.ndarray:
    """Texture + shading for points on the head surface."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    shade = 0.35 + 0.65 * np.maximum(normals @ LIGHT_DIR, 0.0)
    tint = 1.0 + 0.06 * np.sin(4.0 * x) + 0.05 * np.cos(3.0 * y)
    color = SKIN[None, :] * (shade * tint)[:, None]

    front = z > 0
    for ex, ey in EYE_CENTERS:
        r2 = ((x - ex) / EYE_RX) ** 2 + ((y - ey) / EYE_RY) ** 2
        iris = front & (r2 < 1.0)
        color[iris] = IRIS * shade[iris, None]
        pupil = front & (r2 < 0.12)
        color[pupil] = PUPIL

    ext = _mouth_extent(y, aperture)
    inside = front & (np.abs(x) < ext)
    lo_lip_top = MOUTH_Y - aperture
    upper = inside & (y >= MOUTH_Y) & (y <= MOUTH_Y + LIP_H)
    lower = inside & (y <= lo_lip_top) & (y >= lo_lip_top - LIP_H)
    color[upper] = LIP_UPPER * shade[upper, None]
    color[lower] = LIP_LOWER * shade[lower, None]
    if aperture > 1e-6:
        interior = inside & (y > lo_lip_top) & (y < MOUTH_Y)
        teeth = interior & (y > MOUTH_Y - TEETH_BAND)
        color[interior & ~teeth] = CAVITY
        color[teeth] = TEETH
    return np.clip(color, 0.0, 1.0)


def render_ground_truth(cam: CameraPose, aperture: float) -> np.ndarray:
    """Analytic ray-cast render of the head; black background."""
    h, w = cam.image_h, cam.image_w
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dirs_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                         np.ones_like(xs)], axis=-1).reshape(-1, 3)
    Rt = cam.rotation.T
    origin = -Rt @ cam.translation
    dirs = dirs_cam @ cam.rotation  # rows: world-space ray directions

    inv = 1.0 / HEAD_RADII
    o = origin * inv
    d = dirs * inv[None, :]
    a = (d * d).sum(axis=1)
    b = 2.0 * (d @ o)
    c = o @ o - 1.0
    disc = b * b - 4 * a * c
    hit = disc > 0
    img = np.zeros((h * w, 3))
    if np.any(hit):
        t = (-b[hit] - np.sqrt(disc[hit])) / (2 * a[hit])
        good = t > cam.near
        idx = np.flatnonzero(hit)[good]
        pts = origin[None, :] + t[good, None] * dirs[idx]
        normals = pts / (HEAD_RADII ** 2)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        img[idx] = surface_color(pts, normals, aperture)
    return img.reshape(h, w, 3)


def _fibonacci_ellipsoid(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    unit = np.stack([np.cos(theta) * np.sin(phi), np.cos(phi),
                     np.sin(theta) * np.sin(phi)], axis=1)
    return unit * HEAD_RADII


@dataclass
class _PriorLayout:
    """Index bookkeeping for the generated prior mesh."""
    lower_lip: np.ndarray  # vertex indices that move with the jaw aperture


def make_prior_mesh(preset: ScenePreset, rng: np.random.Generator):
    """Prior mesh with a 300-vertex mouth/eye completion set.

    Completion budget: 80 eye + 172 teeth/cavity + 8 upper-lip + 40
    lower-lip vertices. The 40 lower-lip vertices translate with the jaw
    aperture in per-frame priors; the designated lip landmark set is the 8
    upper-lip vertices plus the central row of 8 lower-lip vertices.
    """
    other = _fibonacci_ellipsoid(preset.n_other_vertices)
    verts = [other]
    regions = [REGION_OTHER] * preset.n_other_vertices

    def on_front(x, y, depth_scale=1.0):
        return np.stack([x, y, depth_scale * ellipsoid_front_z(x, y)], axis=1)

    # eye patches: 40 vertices each
    for ex, ey in EYE_CENTERS:
        gx, gy = np.meshgrid(np.linspace(-0.8, 0.8, 8), np.linspace(-0.8, 0.8, 5))
        verts.append(on_front(ex + gx.ravel() * EYE_RX, ey + gy.ravel() * EYE_RY))
        regions += [REGION_EYE] * 40

    # teeth / cavity grid, slightly recessed, spanning the fixed teeth band
    # plus a little cavity below it: 172 vertices
    gx, gy = np.meshgrid(np.linspace(-0.18, 0.18, 12),
                         np.linspace(MOUTH_Y - 0.13, MOUTH_Y - 0.005, 15))
    teeth = on_front(gx.ravel()[:172], gy.ravel()[:172], depth_scale=0.92)
    verts.append(teeth)
    regions += [REGION_MOUTH] * 172

    lip_x = np.linspace(-0.16, 0.16, 8)
    upper_start = sum(v.shape[0] for v in verts)
    verts.append(on_front(lip_x, np.full(8, MOUTH_Y + 0.02)))
    regions += [REGION_MOUTH] * 8

    lower_start = upper_start + 8
    lower_rows = []
    for row_y in np.linspace(MOUTH_Y - 0.038, MOUTH_Y - 0.002, 5):
        lower_rows.append(on_front(lip_x, np.full(8, row_y)))
    verts.append(np.concatenate(lower_rows))
    regions += [REGION_MOUTH] * 40

    vertices = np.concatenate(verts)
    lower_all = np.arange(lower_start, lower_start + 40)
    upper_lip = np.arange(upper_start, upper_start + 8)
    lower_mid = lower_all[16:24]  # central row
    lip = np.concatenate([upper_lip, lower_mid])

    # outline landmarks: extreme silhouette points of the base vertex set
    outline = [int(np.argmax(other[:, 0])), int(np.argmin(other[:, 0])),
               int(np.argmax(other[:, 1])), int(np.argmin(other[:, 1]))]
    landmarks = np.concatenate([np.array(outline, dtype=np.int64), lip])

    prior = PriorMesh(vertices=vertices, regions=regions,
                      landmarks=landmarks, lip_indices=lip)
    return prior, _PriorLayout(lower_lip=lower_all)


def _prior_at_aperture(prior: PriorMesh, layout: _PriorLayout,
                       aperture: float) -> PriorMesh:
    verts = prior.vertices.copy()
    verts[layout.lower_lip, 1] -= aperture
    return PriorMesh(vertices=verts, regions=list(prior.regions),
                     landmarks=prior.landmarks.copy(),
                     lip_indices=prior.lip_indices.copy())


def _camera_ring(preset: ScenePreset):
    s = preset.resolution
    cams = []
    if preset.name == "static-head":
        azimuths = np.linspace(-40, 40, preset.n_frames) * np.pi / 180.0
        elevations = np.where(np.arange(preset.n_frames) % 2 == 0, 6.0, -6.0) * np.pi / 180.0
    else:
        azimuths = np.zeros(preset.n_frames)
        elevations = np.zeros(preset.n_frames)
    for az, el in zip(azimuths, elevations):
        r = preset.camera_distance
        eye = np.array([r * np.sin(az) * np.cos(el), r * np.sin(el),
                        r * np.cos(az) * np.cos(el)])
        cams.append(CameraPose.look_at(eye=eye, target=[0, 0, 0], up=[0, 1, 0],
                                       fx=s, fy=s, cx=s / 2, cy=s / 2,
                                       image_w=s, image_h=s))
    return cams


def _quantize(img: np.ndarray) -> np.ndarray:
    """Match the 8-bit PNG round trip so in-memory and on-disk frames agree."""
    return np.clip(np.rint(img * 255.0), 0, 255) / 255.0


def synth_scene(seed: int, preset: ScenePreset | str = "static-head") -> SceneBundle:
    """Generate a deterministic scene bundle for the given preset."""
    if isinstance(preset, str):
        if preset not in ("static-head", "talking-head"):
            raise ValueError(f"unknown preset {preset!r}")
        preset = ScenePreset(name=preset,
                             n_frames=8 if preset == "static-head" else 32)
    rng = np.random.default_rng(seed)
    cams = _camera_ring(preset)
    base_prior, layout = make_prior_mesh(preset, rng)

    if preset.name == "talking-head":
        t = np.arange(preset.n_frames)
        swing = preset.aperture_amp - preset.rest_aperture
        curve = preset.rest_aperture + swing * np.sin(
            2 * np.pi * preset.aperture_cycles * t / max(preset.n_frames - 1, 1))
        audio = AudioFeatureTrack(
            frames=synthetic_audio_embedding(curve, preset.audio_dim, seed=seed),
            frame_rate=preset.frame_rate)
    else:
        curve = np.full(preset.n_frames, preset.rest_aperture)
        audio = None

    frames = [_quantize(render_ground_truth(cam, ap))
              for cam, ap in zip(cams, curve)]
    priors = [_prior_at_aperture(base_prior, layout, ap) for ap in curve]

    src = frames[0]
    f_local = extract_local_features(src, preset.local_resolution,
                                     preset.local_channels)
    f_global = extract_global_features(src, preset.global_channels)
    return SceneBundle(preset=preset, seed=seed, frames=frames, cameras=cams,
                       priors=priors, f_local=f_local, f_global=f_global,
                       audio=audio, driving_curve=curve, source_index=0)


def lip_anchor_projections(prior: PriorMesh, cam: CameraPose) -> np.ndarray:
    """Pixel positions of the designated lip landmarks (exact ground truth)."""
    pts = prior.lip_vertices
    t = cam.world_to_cam(pts)
    u = cam.fx * t[:, 0] / t[:, 2] + cam.cx
    v = cam.fy * t[:, 1] / t[:, 2] + cam.cy
    return np.stack([u, v], axis=1)


def lip_aperture_px(anchors_px: np.ndarray) -> float:
    """Vertical gap between the lower and upper lip anchor rows, in pixels."""
    upper = anchors_px[:8, 1].mean()
    lower = anchors_px[8:, 1].mean()
    return float(lower - upper)
