"""Fifteen seeded image corruptions with five severity levels each.

Images are float arrays of shape (3, 32, 32) with values in [0, 1]. Every
corruption is a pure function of (image, spec, seed): all randomness comes
from ``rng.make_rng(seed)``. Spatial filters and warps use reflect padding.

Severity constants live in a ``SeverityParams`` table; the compiled-in
defaults follow the 32x32 parameterization of the common-corruptions code
and can be overridden from a text file of lines like::

    gaussian_noise.3 = [0.08]

A parameter vector of all zeros turns its corruption into the identity.
"""

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import jpeg
from .errors import FormatError, InvalidSpecError, ShapeError
from .rng import make_rng

IMAGE_SHAPE = (3, 32, 32)

FAMILIES = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "glass_blur",
    "motion_blur",
    "zoom_blur",
    "snow",
    "frost",
    "fog",
    "brightness",
    "contrast",
    "elastic_transform",
    "pixelate",
    "jpeg_compression",
)

DISPLAY_NAMES = (
    "Gaussian noise",
    "Shot noise",
    "Impulse noise",
    "Defocus blur",
    "Frosted glass blur",
    "Motion blur",
    "Zoom blur",
    "Snow",
    "Frost",
    "Fog",
    "Brightness",
    "Contrast",
    "Elastic transform",
    "Pixelate",
    "JPEG compression",
)

NUM_SEVERITIES = 5
NUM_SPECS = len(FAMILIES) * NUM_SEVERITIES


@dataclass(frozen=True, order=True)
class CorruptionSpec:
    """One of the 75 transformations: a family name and a severity in 1..5."""

    family: str
    severity: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidSpecError(f"unknown corruption family {self.family!r}")
        if isinstance(self.severity, bool) or not isinstance(self.severity, (int, np.integer)):
            raise InvalidSpecError(f"severity must be an integer, got {self.severity!r}")
        if not 1 <= self.severity <= NUM_SEVERITIES:
            raise InvalidSpecError(f"severity must be in 1..5, got {self.severity}")
        object.__setattr__(self, "severity", int(self.severity))

    @property
    def family_index(self):
        return FAMILIES.index(self.family)

    @property
    def index(self):
        return self.family_index * NUM_SEVERITIES + self.severity - 1

    @property
    def display_name(self):
        return DISPLAY_NAMES[self.family_index]

    @classmethod
    def from_index(cls, index):
        index = int(index)
        if not 0 <= index < NUM_SPECS:
            raise InvalidSpecError(f"spec index must be in 0..74, got {index}")
        return cls(FAMILIES[index // NUM_SEVERITIES], index % NUM_SEVERITIES + 1)

    def __str__(self):
        return f"{self.family}.{self.severity}"


def list_corruptions():
    """All 75 specs in index order."""
    return [CorruptionSpec.from_index(i) for i in range(NUM_SPECS)]


def family_from_name(name):
    """Resolve a family given as a snake_case name, display name or index."""
    text = str(name).strip()
    if text.isdigit():
        i = int(text)
        if i < len(FAMILIES):
            return FAMILIES[i]
        raise InvalidSpecError(f"family index must be in 0..14, got {i}")
    key = text.lower().replace("-", "_").replace(" ", "_")
    if key in FAMILIES:
        return key
    for fam, disp in zip(FAMILIES, DISPLAY_NAMES):
        if key == disp.lower().replace(" ", "_"):
            return fam
    raise InvalidSpecError(f"unknown corruption family {name!r}")


# Per family: five parameter vectors, severity 1 first.
DEFAULT_PARAMS = {
    # noise standard deviation
    "gaussian_noise": [[0.04], [0.06], [0.08], [0.09], [0.10]],
    # photon count scale; lower is noisier
    "shot_noise": [[500], [250], [100], [75], [50]],
    # fraction of corrupted elements
    "impulse_noise": [[0.01], [0.02], [0.03], [0.05], [0.07]],
    # disk radius, alias-blur sigma
    "defocus_blur": [[0.3, 0.4], [0.4, 0.5], [0.5, 0.6], [1.0, 0.2], [1.5, 0.1]],
    # blur sigma, max swap distance, swap rounds
    "glass_blur": [[0.05, 1, 1], [0.25, 1, 1], [0.4, 1, 1], [0.25, 1, 2], [0.4, 1, 2]],
    # line length, falloff sigma along the line
    "motion_blur": [[6, 1.0], [6, 1.5], [6, 2.0], [8, 2.0], [9, 2.5]],
    # largest zoom factor (exclusive), zoom step
    "zoom_blur": [[1.06, 0.01], [1.11, 0.01], [1.16, 0.01], [1.21, 0.01], [1.26, 0.01]],
    # flake mean, flake std, zoom, threshold, blur length, blur sigma, base weight
    "snow": [
        [0.1, 0.2, 1.0, 0.6, 8, 3, 0.95],
        [0.1, 0.2, 1.0, 0.5, 10, 4, 0.9],
        [0.15, 0.3, 1.75, 0.55, 10, 4, 0.9],
        [0.25, 0.3, 2.25, 0.6, 12, 6, 0.85],
        [0.3, 0.3, 1.25, 0.65, 14, 12, 0.8],
    ],
    # image weight, frost weight
    "frost": [[1.0, 0.2], [1.0, 0.3], [0.9, 0.4], [0.85, 0.4], [0.75, 0.45]],
    # fog strength, plasma roughness decay
    "fog": [[0.2, 3.0], [0.5, 3.0], [0.75, 2.5], [1.0, 2.0], [1.5, 1.75]],
    # added HSV value
    "brightness": [[0.05], [0.1], [0.15], [0.2], [0.3]],
    # contrast factor; lower is stronger
    "contrast": [[0.75], [0.5], [0.4], [0.3], [0.15]],
    # displacement scale, displacement smoothing sigma, affine jitter (pixels)
    "elastic_transform": [
        [0.0, 0.0, 2.56],
        [1.6, 6.4, 2.24],
        [2.56, 1.92, 1.92],
        [3.2, 1.28, 1.6],
        [3.2, 0.96, 0.96],
    ],
    # downsampled side as a fraction of 32
    "pixelate": [[0.95], [0.9], [0.85], [0.75], [0.65]],
    # JPEG quality
    "jpeg_compression": [[80], [65], [58], [50], [40]],
}

PARAM_COUNTS = {fam: len(rows[0]) for fam, rows in DEFAULT_PARAMS.items()}

CONFIG_VERSION = 1


class SeverityParams:
    """Per-family, per-severity parameter vectors.

    Starts from ``DEFAULT_PARAMS``; ``override`` replaces single entries.
    """

    def __init__(self, overrides=None):
        self._table = {fam: [list(map(float, row)) for row in rows] for fam, rows in DEFAULT_PARAMS.items()}
        for (fam, sev), values in (overrides or {}).items():
            self.override(fam, sev, values)

    def override(self, family, severity, values):
        spec = CorruptionSpec(family, severity)
        values = [float(v) for v in values]
        if len(values) != PARAM_COUNTS[family]:
            raise InvalidSpecError(
                f"{spec}: expected {PARAM_COUNTS[family]} parameter(s), got {len(values)}"
            )
        if not all(math.isfinite(v) for v in values):
            raise InvalidSpecError(f"{spec}: parameters must be finite")
        self._table[family][severity - 1] = values

    def get(self, spec):
        return tuple(self._table[spec.family][spec.severity - 1])

    def __eq__(self, other):
        return isinstance(other, SeverityParams) and self._table == other._table

    def to_text(self):
        lines = [f"# severity parameters", f"version = {CONFIG_VERSION}"]
        for fam in FAMILIES:
            for sev, row in enumerate(self._table[fam], start=1):
                lines.append(f"{fam}.{sev} = [{', '.join(repr(v) for v in row)}]")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, path=None):
        params = cls()
        key_re = re.compile(r"^([A-Za-z_][A-Za-z0-9_ -]*)\.(\d+)$")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError("expected 'family.severity = [values]'", path, lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "version":
                if value != str(CONFIG_VERSION):
                    raise FormatError(f"unsupported config version {value}", path, lineno)
                continue
            m = key_re.match(key)
            if not m:
                raise FormatError(f"bad key {key!r}", path, lineno)
            if not (value.startswith("[") and value.endswith("]")):
                raise FormatError("value must be a bracketed list", path, lineno)
            try:
                values = [float(v) for v in value[1:-1].split(",") if v.strip()]
                params.override(family_from_name(m.group(1)), int(m.group(2)), values)
            except (ValueError, InvalidSpecError) as exc:
                raise FormatError(str(exc), path, lineno) from None
        return params

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), path=path)


DEFAULT_SEVERITY = SeverityParams()


# ---------------------------------------------------------------------------
# helpers


def _check_image(image):
    image = np.asarray(image)
    if image.shape != IMAGE_SHAPE:
        raise ShapeError(f"expected image of shape {IMAGE_SHAPE}, got {image.shape}")
    x = image.astype(np.float64)
    if not (np.isfinite(x).all() and x.min() >= 0.0 and x.max() <= 1.0):
        raise ShapeError("image values must lie in [0, 1]")
    return x


def _filter_channels(image, kernel):
    return np.stack([ndimage.convolve(ch, kernel, mode="reflect") for ch in image])


def _gaussian_kernel(sigma, radius):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t ** 2) / (2 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _gaussian_blur(image, sigma):
    if sigma <= 0:
        return image.copy()
    return ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect", truncate=4.0)


def disk_kernel(radius, alias_blur):
    """Normalized disk of the given radius smoothed by a 3x3 Gaussian."""
    half = max(1, math.ceil(radius)) + 1
    t = np.arange(-half, half + 1)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    disk = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    disk /= disk.sum()
    if alias_blur > 0:
        disk = ndimage.convolve(disk, _gaussian_kernel(alias_blur, 1), mode="constant")
    return disk / disk.sum()


def motion_kernel(length, sigma, angle_deg):
    """Line kernel of ``length`` taps along ``angle_deg``, weights falling off with ``sigma``.

    Taps are splatted bilinearly so arbitrary angles stay normalized.
    """
    n = max(1, int(round(length)))
    half = n
    size = 2 * half + 1
    kernel = np.zeros((size, size))
    theta = math.radians(angle_deg)
    dx, dy = math.cos(theta), -math.sin(theta)
    for t in range(n):
        w = math.exp(-(t ** 2) / (2 * sigma ** 2)) if sigma > 0 else float(t == 0)
        x = half + t * dx
        y = half + t * dy
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                if 0 <= yy < size and 0 <= xx < size:
                    kernel[yy, xx] += w * wy * wx
    return kernel / kernel.sum()


def plasma_fractal(rng, mapsize=32, decay=3.0):
    """Diamond-square height map on a torus, normalized to [0, 1]."""
    if mapsize & (mapsize - 1):
        raise ValueError("mapsize must be a power of two")
    grid = np.zeros((mapsize, mapsize))
    step = mapsize
    wibble = 100.0

    def wibbled_mean(arr):
        return arr / 4 + wibble * rng.uniform(-wibble, wibble, arr.shape)

    while step >= 2:
        half = step // 2
        corners = grid[0:mapsize:step, 0:mapsize:step]
        square = corners + np.roll(corners, -1, axis=0)
        square = square + np.roll(square, -1, axis=1)
        grid[half:mapsize:step, half:mapsize:step] = wibbled_mean(square)

        centers = grid[half:mapsize:step, half:mapsize:step]
        corners = grid[0:mapsize:step, 0:mapsize:step]
        lsum = centers + np.roll(centers, 1, axis=0) + corners + np.roll(corners, -1, axis=1)
        grid[0:mapsize:step, half:mapsize:step] = wibbled_mean(lsum)
        tsum = centers + np.roll(centers, 1, axis=1) + corners + np.roll(corners, -1, axis=0)
        grid[half:mapsize:step, 0:mapsize:step] = wibbled_mean(tsum)

        step //= 2
        wibble /= decay
    grid -= grid.min()
    top = grid.max()
    return grid / top if top > 0 else grid


def frost_texture(rng, size=32):
    """Procedural frost: ridged fractal noise thresholded into bright crystalline streaks."""
    layers = []
    for decay in (1.6, 2.2):
        p = plasma_fractal(rng, mapsize=64, decay=decay)
        off = rng.integers(0, 64 - size, size=2)
        layers.append(p[off[0]:off[0] + size, off[1]:off[1] + size])
    ridged = 1.0 - np.abs(2.0 * layers[0] - 1.0)
    streaks = np.clip((ridged - 0.55) / 0.45, 0.0, 1.0) ** 1.5
    haze = 0.35 + 0.3 * layers[1]
    base = np.clip(haze + 0.65 * streaks, 0.0, 1.0)
    tint = np.array([0.86, 0.93, 1.0])[:, None, None]
    return np.clip(base[None] * tint, 0.0, 1.0)


def clipped_zoom(plane, factor):
    """Zoom into the centre of a square 2-D array, keeping its size."""
    h = plane.shape[0]
    ch = int(math.ceil(h / factor))
    top = (h - ch) // 2
    crop = plane[top:top + ch, top:top + ch]
    zoomed = ndimage.zoom(crop, factor, order=1, mode="reflect")
    trim = (zoomed.shape[0] - h) // 2
    return zoomed[trim:trim + h, trim:trim + h]


def rgb_to_hsv(rgb):
    """(3, H, W) RGB in [0, 1] to HSV with hue in [0, 1)."""
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _gray(image):
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


# ---------------------------------------------------------------------------
# the corruptions; each takes (image float64 (3, 32, 32), params tuple, rng)


def gaussian_noise(x, p, rng):
    (sigma,) = p
    return x + sigma * rng.standard_normal(x.shape)


def shot_noise(x, p, rng):
    (scale,) = p
    if scale <= 0:
        raise InvalidSpecError("shot_noise scale must be positive")
    return rng.poisson(x * scale) / scale


def impulse_noise(x, p, rng):
    (amount,) = p
    hit = rng.random(x.shape) < amount
    salt = rng.random(x.shape) < 0.5
    return np.where(hit, salt.astype(np.float64), x)


def defocus_blur(x, p, rng):
    radius, alias = p
    return _filter_channels(x, disk_kernel(radius, alias))


def glass_blur(x, p, rng):
    sigma, delta, rounds = p[0], int(p[1]), int(p[2])
    x = _gaussian_blur(x, sigma)
    _, h, w = x.shape
    # Swaps are applied sequentially on a flat index permutation.
    perm = list(range(h * w))
    rows = range(h - 1 - delta, delta - 1, -1)
    cols = range(w - 1 - delta, delta - 1, -1)
    n = len(rows) * len(cols)
    for _ in range(rounds):
        offsets = rng.integers(-delta, delta + 1, size=(n, 2)).tolist()
        k = 0
        for yy in rows:
            for xx in cols:
                dy, dx = offsets[k]
                k += 1
                a = yy * w + xx
                b = (yy + dy) * w + (xx + dx)
                perm[a], perm[b] = perm[b], perm[a]
    x = x.reshape(3, -1)[:, perm].reshape(3, h, w)
    return _gaussian_blur(x, sigma)


def motion_blur(x, p, rng):
    length, sigma = p
    angle = rng.uniform(-45, 45)
    return _filter_channels(x, motion_kernel(length, sigma, angle))


def zoom_blur(x, p, rng):
    zmax, step = p
    if step <= 0:
        raise InvalidSpecError("zoom_blur step must be positive")
    n = max(1, int(round((zmax - 1.0) / step)))
    out = x.copy()
    for k in range(n):
        factor = 1.0 + k * step
        out += np.stack([clipped_zoom(ch, factor) for ch in x])
    return out / (n + 1)


def snow(x, p, rng):
    loc, scale, zoom, threshold, blur_len, blur_sigma, base_weight = p
    _, h, w = x.shape
    layer = rng.normal(loc=loc, scale=scale, size=(h, w))
    layer = clipped_zoom(layer, zoom)
    layer[layer < threshold] = 0.0
    layer = np.clip(layer, 0.0, 1.0)
    angle = rng.uniform(-135, -45)
    layer = ndimage.convolve(layer, motion_kernel(blur_len, blur_sigma, angle), mode="reflect")
    gray = _gray(x)[None]
    base = base_weight * x + (1 - base_weight) * np.maximum(x, gray * 1.5 + 0.5)
    return base + layer[None] + np.rot90(layer, 2)[None]


def frost(x, p, rng):
    image_weight, frost_weight = p
    return image_weight * x + frost_weight * frost_texture(rng, x.shape[1])


def fog(x, p, rng):
    strength, decay = p
    haze = plasma_fractal(rng, mapsize=32, decay=decay)[: x.shape[1], : x.shape[2]]
    return (x + strength * haze[None]) / (1.0 + strength)


def brightness(x, p, rng):
    (amount,) = p
    hsv = rgb_to_hsv(np.clip(x, 0, 1))
    hsv[2] = np.clip(hsv[2] + amount, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def contrast(x, p, rng):
    (factor,) = p
    mean = x.mean()
    return (x - mean) * factor + mean


def elastic_transform(x, p, rng):
    alpha, sigma, jitter = p
    _, h, w = x.shape
    center = np.array([w // 2, h // 2], dtype=np.float64)
    half = min(h, w) // 3
    src = np.array([center + half, [center[0] + half, center[1] - half], center - half])
    dst = src + rng.uniform(-jitter, jitter, size=src.shape)
    # Affine map from src to dst points, solved in homogeneous coordinates.
    affine = np.linalg.solve(np.c_[src, np.ones(3)], dst).T
    inverse = np.linalg.inv(np.vstack([affine, [0, 0, 1]]))[:2]

    def field():
        noise = rng.uniform(-1, 1, size=(h, w))
        if sigma > 0:
            noise = ndimage.gaussian_filter(noise, sigma, mode="reflect", truncate=3.0)
        return noise * alpha

    dx = field()
    dy = field()
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    px = xx + dx
    py = yy + dy
    sx = inverse[0, 0] * px + inverse[0, 1] * py + inverse[0, 2]
    sy = inverse[1, 0] * px + inverse[1, 1] * py + inverse[1, 2]
    coords = np.array([sy, sx])
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="reflect") for ch in x])


def pixelate(x, p, rng):
    (fraction,) = p
    _, h, w = x.shape
    side = max(1, math.ceil(h * fraction - 1e-9))
    down = np.floor((np.arange(side) + 0.5) * h / side).astype(int)
    up = np.floor((np.arange(h) + 0.5) * side / h).astype(int)
    small = x[:, down][:, :, down]
    return small[:, up][:, :, up]


def jpeg_compression(x, p, rng):
    (quality,) = p
    rgb = np.round(np.clip(x, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    out = jpeg.roundtrip(rgb, int(round(quality)))
    return out.transpose(2, 0, 1).astype(np.float64) / 255.0


CORRUPTIONS = {
    "gaussian_noise": gaussian_noise,
    "shot_noise": shot_noise,
    "impulse_noise": impulse_noise,
    "defocus_blur": defocus_blur,
    "glass_blur": glass_blur,
    "motion_blur": motion_blur,
    "zoom_blur": zoom_blur,
    "snow": snow,
    "frost": frost,
    "fog": fog,
    "brightness": brightness,
    "contrast": contrast,
    "elastic_transform": elastic_transform,
    "pixelate": pixelate,
    "jpeg_compression": jpeg_compression,
}


def apply_corruption(image, spec, seed, params=None):
    """Corrupt one (3, 32, 32) image; the result is float32 and clipped to [0, 1]."""
    if not isinstance(spec, CorruptionSpec):
        raise InvalidSpecError(f"expected a CorruptionSpec, got {spec!r}")
    x = _check_image(image)
    values = (params or DEFAULT_SEVERITY).get(spec)
    if not any(values):
        return np.clip(x, 0.0, 1.0).astype(np.float32)
    out = CORRUPTIONS[spec.family](x, values, make_rng(seed))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _corrupt_range(images, spec, seed, params, start):
    from .rng import derive_seed

    out = np.empty(images.shape, dtype=np.float32)
    for k, image in enumerate(images):
        out[k] = apply_corruption(image, spec, derive_seed(seed, start + k), params)
    return out


def corrupt_images(images, spec, seed, params=None, workers=1):
    """Corrupt a stack of images; image ``i`` uses the stream ``(seed, i)``.

    The result does not depend on ``workers``.
    """
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    if workers <= 1 or n < 64:
        return _corrupt_range(images, spec, seed, params, 0)
    from concurrent.futures import ProcessPoolExecutor

    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = [
            pool.submit(_corrupt_range, images[a:b], spec, seed, params, int(a))
            for a, b in zip(bounds[:-1], bounds[1:])
            if b > a
        ]
        return np.concatenate([p.result() for p in parts])


def corrupt_dataset(dataset, spec, seed, params=None, workers=1):
    """Corrupt every image of a LabeledDataset; labels pass through unchanged."""
    from .data_io import LabeledDataset

    if len(dataset) == 0:
        raise ShapeError("cannot corrupt an empty dataset")
    images = corrupt_images(dataset.images, spec, seed, params, workers)
    return LabeledDataset(images, dataset.labels.copy(), dataset.class_count, dataset.split, f"{dataset.identifier}-{spec}")
