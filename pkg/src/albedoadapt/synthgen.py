"""Procedural scene generator for both domains.

A scene is a stack of flat primitives over a background, every region
colored from a small fixed palette, lit by one directional light over a
smooth Gaussian-bump height field. The synthetic domain renders the pure
Lambertian product rgb = clip(albedo * shading). The real-like domain
starts from the same product and layers nuisances on top: additive specular
lobes, a multiplicative soft cast shadow, and a global per-channel gain +
gamma shift. The albedo field is kept on real-like samples only as the
hidden evaluation truth.

All geometry and lighting lives in SceneSpec, so renders are pure functions
of (spec, size, seed); the seed only drives nuisance magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import SHADING_MAX, ScenePair, derive_seed, quantize, rng_for

ALBEDO_LO = 0.05
ALBEDO_HI = 0.95
AUGMENT_KNEE = 0.9
GAIN_RANGE = (0.5, 1.5)

# Every albedo region uses one of these colors. The wide gaps between
# entries make a recovered albedo checkable from the image alone: flat
# regions that land between palette entries can only come from residual
# shading or an unremoved tint, never from a valid albedo.
ALBEDO_PALETTE = (
    (0.25, 0.25, 0.25),
    (0.25, 0.25, 0.70),
    (0.25, 0.70, 0.25),
    (0.25, 0.70, 0.70),
    (0.70, 0.25, 0.25),
    (0.70, 0.25, 0.70),
    (0.70, 0.70, 0.25),
    (0.70, 0.70, 0.70),
)


def _palette_color(rng: np.random.Generator) -> tuple:
    return ALBEDO_PALETTE[int(rng.integers(0, len(ALBEDO_PALETTE)))]


@dataclass
class Primitive:
    kind: str  # disk | rect | tri
    params: tuple  # geometry in unit scene coordinates
    color0: tuple  # rgb in [ALBEDO_LO, ALBEDO_HI]
    color1: Optional[tuple] = None  # gradient end color, None for flat
    grad_dir: Optional[tuple] = None  # unit 2-vector for the gradient axis

    def validate(self) -> None:
        if self.kind == "disk":
            cx, cy, r = self.params
            if r <= 0.02:
                raise ValueError(f"degenerate disk radius {r}")
        elif self.kind == "rect":
            cx, cy, hw, hh, theta = self.params
            if hw <= 0.02 or hh <= 0.02:
                raise ValueError(f"degenerate rect half-extents ({hw}, {hh})")
        elif self.kind == "tri":
            (x0, y0), (x1, y1), (x2, y2) = self.params
            area = 0.5 * abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
            if area <= 1e-3:
                raise ValueError(f"degenerate triangle area {area}")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        for col in (self.color0, self.color1):
            if col is None:
                continue
            if min(col) < ALBEDO_LO or max(col) > ALBEDO_HI:
                raise ValueError(f"albedo color {col} outside [{ALBEDO_LO}, {ALBEDO_HI}]")


@dataclass
class SceneSpec:
    """Full description of one scene; rendering adds nothing random."""

    background: tuple
    primitives: list
    bumps: list  # (cx, cy, sigma, amplitude) height-field bumps
    light_dir: tuple  # unit 2-vector, azimuthal direction of the light
    light_elev: float  # radians above the plane
    light_intensity: float  # in [0.3, 1.5]
    ambient: float
    specular: bool = False
    cast_shadow: bool = False
    color_shift: bool = False

    def __post_init__(self) -> None:
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for prim in self.primitives:
            prim.validate()
        if not (0.3 <= self.light_intensity <= 1.5):
            raise ValueError(f"light intensity {self.light_intensity} outside [0.3, 1.5]")
        norm = math.hypot(*self.light_dir)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("light_dir must be a unit 2-vector")

    @property
    def any_nuisance(self) -> bool:
        return self.specular or self.cast_shadow or self.color_shift


# ---------------------------------------------------------------------------
# spec sampling


def sample_scene_spec(rng: np.random.Generator, real_like: bool = False) -> SceneSpec:
    """Draw a random scene; real_like also draws nuisance flags (>= 1 set)."""
    background = _palette_color(rng)
    prims = []
    for _ in range(int(rng.integers(2, 5))):
        kind = ["disk", "rect", "tri"][int(rng.integers(0, 3))]
        color0 = _palette_color(rng)
        # albedo stays piecewise-constant and on-palette: smooth or
        # off-palette structure in an image is then attributable to
        # shading, which is what the classifier keys on
        color1 = None
        grad_dir = None
        if kind == "disk":
            params = (rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.08, 0.3))
        elif kind == "rect":
            params = (
                rng.uniform(0.15, 0.85),
                rng.uniform(0.15, 0.85),
                rng.uniform(0.08, 0.3),
                rng.uniform(0.08, 0.3),
                rng.uniform(0.0, math.pi),
            )
        else:
            while True:
                pts = rng.uniform(0.1, 0.9, size=(3, 2))
                area = 0.5 * abs(
                    (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                    - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
                )
                if area > 0.02:
                    break
            params = (tuple(pts[0]), tuple(pts[1]), tuple(pts[2]))
        prims.append(Primitive(kind, params, color0, color1, grad_dir))

    # the two domains differ in shading statistics: synthetic scenes are
    # lit over broad, image-scale bumps, real-like scenes over small local
    # dimples (plus the cast-shadow/specular nuisances drawn below), so a
    # synthetic-trained module meets genuinely out-of-distribution shading
    bumps = []
    if real_like:
        for _ in range(int(rng.integers(2, 5))):
            bumps.append(
                (
                    rng.uniform(0.1, 0.9),
                    rng.uniform(0.1, 0.9),
                    rng.uniform(0.05, 0.15),
                    rng.uniform(0.08, 0.3),
                )
            )
    else:
        for _ in range(int(rng.integers(2, 5))):
            bumps.append(
                (
                    rng.uniform(0.1, 0.9),
                    rng.uniform(0.1, 0.9),
                    rng.uniform(0.35, 0.7),
                    rng.uniform(0.15, 0.35),
                )
            )
    phi = rng.uniform(0.0, 2.0 * math.pi)
    spec = SceneSpec(
        background=background,
        primitives=prims,
        bumps=bumps,
        light_dir=(math.cos(phi), math.sin(phi)),
        light_elev=rng.uniform(math.radians(30), math.radians(70)),
        light_intensity=rng.uniform(0.75, 1.1),
        ambient=rng.uniform(0.2, 0.35),
    )
    if real_like:
        flags = rng.uniform(size=3) < 0.7
        if not flags.any():
            flags[int(rng.integers(0, 3))] = True
        spec = replace(
            spec,
            specular=bool(flags[0]),
            cast_shadow=bool(flags[1]),
            color_shift=bool(flags[2]),
        )
    return spec


# ---------------------------------------------------------------------------
# field rasterization


def _grid(size: int):
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="xy")


def _primitive_mask(prim: Primitive, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    if prim.kind == "disk":
        cx, cy, r = prim.params
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if prim.kind == "rect":
        cx, cy, hw, hh, theta = prim.params
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    (x0, y0), (x1, y1), (x2, y2) = prim.params
    d0 = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
    d1 = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
    d2 = (x0 - x2) * (yy - y2) - (y0 - y2) * (xx - x2)
    return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))


def albedo_field(spec: SceneSpec, size: int) -> np.ndarray:
    xx, yy = _grid(size)
    A = np.empty((size, size, 3), dtype=np.float64)
    A[:] = np.asarray(spec.background)
    for prim in spec.primitives:
        mask = _primitive_mask(prim, xx, yy)
        if not mask.any():
            continue
        if prim.color1 is None:
            A[mask] = np.asarray(prim.color0)
        else:
            gx, gy = prim.grad_dir
            proj = xx * gx + yy * gy
            lo, hi = proj[mask].min(), proj[mask].max()
            t = np.zeros_like(proj) if hi - lo < 1e-9 else (proj - lo) / (hi - lo)
            c0 = np.asarray(prim.color0)
            c1 = np.asarray(prim.color1)
            grad = (1.0 - t[..., None]) * c0 + t[..., None] * c1
            A[mask] = grad[mask]
    return A


def _height_and_normals(spec: SceneSpec, size: int):
    xx, yy = _grid(size)
    h = np.zeros((size, size), dtype=np.float64)
    hx = np.zeros_like(h)
    hy = np.zeros_like(h)
    for cx, cy, sigma, amp in spec.bumps:
        g = amp * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma * sigma)))
        h += g
        hx += g * (-(xx - cx) / (sigma * sigma))
        hy += g * (-(yy - cy) / (sigma * sigma))
    # slopes scaled so bumps of unit-ish amplitude shade visibly at any size
    norm = np.sqrt(hx * hx * 16.0 + hy * hy * 16.0 + 1.0)
    n = np.stack([-hx * 4.0 / norm, -hy * 4.0 / norm, 1.0 / norm], axis=-1)
    return h, n


def _light_vector(spec: SceneSpec) -> np.ndarray:
    ce, se = math.cos(spec.light_elev), math.sin(spec.light_elev)
    return np.array([spec.light_dir[0] * ce, spec.light_dir[1] * ce, se])


def shading_field(spec: SceneSpec, size: int) -> np.ndarray:
    _, n = _height_and_normals(spec, size)
    lam = np.clip(n @ _light_vector(spec), 0.0, None)
    s = np.clip(spec.ambient + spec.light_intensity * lam, 0.0, SHADING_MAX)
    return np.repeat(s[:, :, None], 3, axis=2)


# ---------------------------------------------------------------------------
# composition and rendering


def compose(albedo: np.ndarray, shading: np.ndarray) -> np.ndarray:
    """clip(albedo * shading, 0, 1); the exact elementwise product pre-clip."""
    a = np.asarray(albedo, dtype=np.float64)
    s = np.asarray(shading, dtype=np.float64)
    if a.shape != s.shape:
        raise ValueError(f"shape mismatch: albedo {a.shape} vs shading {s.shape}")
    if s.min() < 0.0 or s.max() > SHADING_MAX + 1e-12:
        raise ValueError(f"shading outside [0, {SHADING_MAX}]")
    return np.clip(a * s, 0.0, 1.0)


def render_synthetic(spec: SceneSpec, size: int) -> ScenePair:
    """Pure Lambertian render; albedo and shading are snapped to the 16-bit
    storage grid before composition so the identity survives persistence."""
    if spec.any_nuisance:
        raise ValueError("synthetic render requires all nuisance flags off")
    A = quantize(albedo_field(spec, size))
    S = quantize(shading_field(spec, size), scale=SHADING_MAX)
    rgb = compose(A, S)
    return ScenePair(rgb=rgb, albedo=A, shading=S, domain_tag="synthetic")


def _soft_gain(v: np.ndarray, gain: float | np.ndarray) -> np.ndarray:
    """Gain with a tanh shoulder above AUGMENT_KNEE; exactly linear for
    gain <= 1 so unit gain is the identity."""
    u = v * gain
    shoulder = AUGMENT_KNEE + (1.0 - AUGMENT_KNEE) * np.tanh(
        (u - AUGMENT_KNEE) / (1.0 - AUGMENT_KNEE)
    )
    out = np.where(u <= AUGMENT_KNEE, u, shoulder)
    return np.where(np.asarray(gain) * np.ones_like(v) <= 1.0, u, out)


def illuminance_augment(
    image: np.ndarray, gain: Optional[float] = None, seed: Optional[int] = None
) -> np.ndarray:
    """Global intensity scaling with a highlight-preserving soft clip.

    gain outside [0.5, 1.5] is rejected; gain=None draws one uniformly from
    that range using seed. Monotone per pixel, identity at gain 1.0.
    """
    if gain is None:
        rng = np.random.default_rng(0 if seed is None else seed)
        gain = float(rng.uniform(*GAIN_RANGE))
    if not (GAIN_RANGE[0] <= gain <= GAIN_RANGE[1]):
        raise ValueError(f"gain {gain} outside [{GAIN_RANGE[0]}, {GAIN_RANGE[1]}]")
    return _soft_gain(np.asarray(image, dtype=np.float64), float(gain))


@dataclass
class NuisanceParams:
    """Magnitudes for the real-like nuisances; drawn from a seed, but each
    field can be pinned for tests (zero gap at zero magnitudes)."""

    spec_strength: float = 0.0
    spec_power: float = 16.0
    spec_dir: tuple = (0.0, 0.0, 1.0)
    shadow_center: tuple = (0.5, 0.5)
    shadow_radii: tuple = (0.3, 0.2)
    shadow_angle: float = 0.0
    shadow_depth: float = 0.0
    gains: tuple = (1.0, 1.0, 1.0)
    gammas: tuple = (1.0, 1.0, 1.0)


def draw_nuisance_params(spec: SceneSpec, seed: int) -> NuisanceParams:
    rng = np.random.default_rng(seed)
    # draws happen in fixed order regardless of flags, for reproducibility
    spec_strength = float(rng.uniform(0.4, 1.1))
    spec_power = float(rng.uniform(3.0, 10.0))
    jitter = rng.uniform(-0.25, 0.25, size=2)
    base = _light_vector(spec)
    d = base + np.array([jitter[0], jitter[1], 0.0])
    spec_dir = tuple(d / np.linalg.norm(d))
    shadow_center = (float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)))
    shadow_radii = (float(rng.uniform(0.12, 0.28)), float(rng.uniform(0.12, 0.28)))
    shadow_angle = float(rng.uniform(0.0, math.pi))
    shadow_depth = float(rng.uniform(0.55, 0.95))
    # tints stay mild so the albedo scale remains recoverable; the hard
    # nuisances are the structured ones (shadows, highlights)
    gains = tuple(float(g) for g in rng.uniform(0.92, 1.08, size=3))
    gammas = tuple(float(g) for g in rng.uniform(0.92, 1.08, size=3))
    return NuisanceParams(
        spec_strength=spec_strength if spec.specular else 0.0,
        spec_power=spec_power,
        spec_dir=spec_dir,
        shadow_center=shadow_center,
        shadow_radii=shadow_radii,
        shadow_angle=shadow_angle,
        shadow_depth=shadow_depth if spec.cast_shadow else 0.0,
        gains=gains if spec.color_shift else (1.0, 1.0, 1.0),
        gammas=gammas if spec.color_shift else (1.0, 1.0, 1.0),
    )


def _specular_term(spec: SceneSpec, nuis: NuisanceParams, size: int) -> np.ndarray:
    if nuis.spec_strength == 0.0:
        return np.zeros((size, size))
    _, n = _height_and_normals(spec, size)
    half = np.asarray(nuis.spec_dir) + np.array([0.0, 0.0, 1.0])
    half = half / np.linalg.norm(half)
    ndh = np.clip(n @ half, 0.0, None)
    return nuis.spec_strength * ndh**nuis.spec_power


def _shadow_mask(nuis: NuisanceParams, size: int) -> np.ndarray:
    if nuis.shadow_depth == 0.0:
        return np.ones((size, size))
    xx, yy = _grid(size)
    dx, dy = xx - nuis.shadow_center[0], yy - nuis.shadow_center[1]
    ct, st = math.cos(nuis.shadow_angle), math.sin(nuis.shadow_angle)
    u = (dx * ct + dy * st) / nuis.shadow_radii[0]
    v = (-dx * st + dy * ct) / nuis.shadow_radii[1]
    q = np.sqrt(u * u + v * v)
    return 1.0 - nuis.shadow_depth / (1.0 + np.exp((q - 1.0) / 0.22))


def render_real_like(
    spec: SceneSpec,
    size: int,
    seed: int,
    nuisance_overrides: Optional[dict] = None,
) -> ScenePair:
    """Lambertian base plus nuisances; the stored albedo/shading stay the
    clean hidden truth. nuisance_overrides pins drawn magnitudes in tests."""
    if not spec.any_nuisance:
        raise ValueError("real-like render requires at least one nuisance flag")
    A = quantize(albedo_field(spec, size))
    S = quantize(shading_field(spec, size), scale=SHADING_MAX)
    nuis = draw_nuisance_params(spec, seed)
    if nuisance_overrides:
        nuis = replace(nuis, **nuisance_overrides)
    rgb = A * S * _shadow_mask(nuis, size)[:, :, None]
    rgb = rgb + _specular_term(spec, nuis, size)[:, :, None]
    rgb = np.clip(rgb, 0.0, 1.0)
    rgb = _soft_gain(rgb, np.asarray(nuis.gains))
    rgb = np.clip(rgb, 0.0, 1.0) ** np.asarray(nuis.gammas)
    return ScenePair(rgb=rgb, albedo=A, shading=S, domain_tag="real_like")


# ---------------------------------------------------------------------------
# dataset generation


def generate_dataset(
    count: int, domain: str, size: int, seed: int
) -> list[ScenePair]:
    """Deterministic dataset of `count` distinct scenes for one domain."""
    if domain not in ("synthetic", "real_like"):
        raise ValueError(f"unknown domain {domain!r}")
    pairs = []
    seen = set()
    k = 0
    while len(pairs) < count:
        rng = rng_for(seed, "synthgen", domain, k)
        spec = sample_scene_spec(rng, real_like=(domain == "real_like"))
        if domain == "synthetic":
            pair = render_synthetic(spec, size)
        else:
            pair = render_real_like(spec, size, derive_seed(seed, "nuisance", domain, k))
        k += 1
        if pair.sample_id in seen:
            continue
        seen.add(pair.sample_id)
        pairs.append(pair)
    return pairs
