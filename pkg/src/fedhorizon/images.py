"""Image handling: PPM I/O, preprocessing, augmentation, grid-pool features.

Conventions (normative for this package):

* Images are uint8 arrays of shape (H, W, 3), row 0 at the top.
* Bilinear resampling uses half-pixel centers: output pixel (i, j) samples
  the source at ``( (i+0.5)*H_in/H_out - 0.5, (j+0.5)*W_in/W_out - 0.5 )``,
  coordinates clamped to the source grid.
* Rotation by ``a`` degrees maps output pixel (r, c) to the source point
  obtained by rotating its offset from the canvas center
  ``((H-1)/2, (W-1)/2)`` by ``-a``; the canvas size is preserved and
  out-of-canvas taps contribute zero (zero-fill corners). Positive angles
  turn the displayed content clockwise. Multiples of 90 degrees reduce to
  exact index permutations.
* HSV uses the standard hexcone model on channels scaled to [0, 1]:
  ``V = max(R,G,B)``, ``S = (V - min)/V`` (0 when V = 0), and
  ``H = 60 * sector`` with sector ``((G-B)/delta) mod 6`` when V = R,
  ``(B-R)/delta + 2`` when V = G, ``(R-G)/delta + 4`` when V = B
  (H = 0 when delta = 0). The inverse uses ``C = V*S``,
  ``X = C * (1 - |(H/60) mod 2 - 1|)``, ``m = V - C``.
* Float -> uint8 conversion rounds half up: ``floor(x * 255 + 0.5)``.
"""

from dataclasses import dataclass

import numpy as np

from fedhorizon.errors import ConfigError, DataError

ALLOWED_ROTATIONS = tuple(range(0, 360, 45))


@dataclass(frozen=True)
class AugmentationPolicy:
    """Which rotation/flip/brightness variants :func:`augment` emits."""

    rotation_degrees: tuple = ALLOWED_ROTATIONS
    horizontal_flip: bool = True
    brightness_factors: tuple = (1.0, 1.25, 1.5)

    def __post_init__(self):
        rot = tuple(sorted(set(int(r) for r in self.rotation_degrees)))
        bri = tuple(sorted(set(float(f) for f in self.brightness_factors)))
        object.__setattr__(self, "rotation_degrees", rot)
        object.__setattr__(self, "brightness_factors", bri)
        for r in rot:
            if r not in ALLOWED_ROTATIONS:
                raise ValueError(f"rotation {r} is not a multiple of 45 in [0, 315]")
        if 0 not in rot:
            raise ValueError("rotation set must contain the identity angle 0")
        if 1.0 not in bri:
            raise ValueError("brightness factors must contain the identity factor 1.0")
        if any(f <= 0 for f in bri):
            raise ValueError("brightness factors must be positive")

    @property
    def variant_count(self):
        flips = 2 if self.horizontal_flip else 1
        return len(self.rotation_degrees) * flips * len(self.brightness_factors)


def _check_image(image):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a nonempty (H, W, 3) image, got shape {img.shape}")
    return img


def read_ppm(path):
    """Read a binary 8-bit PPM (P6) file into a uint8 (H, W, 3) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        return data[start:pos]

    if token() != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise DataError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval 255, got {maxval})")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:pos + width * height * 3]
    if len(pixels) != width * height * 3:
        raise DataError(f"{path}: PPM pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image):
    """Write a uint8 (H, W, 3) array as binary PPM (P6)."""
    img = _check_image(image)
    if img.dtype != np.uint8:
        raise ValueError("PPM writer expects uint8 pixel data")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize to (out_h, out_w); returns float64, channels kept."""
    img = _check_image(image).astype(np.float64)
    in_h, in_w = img.shape[:2]

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_coords(out_h, in_h)
    x0, x1, wx = axis_coords(out_w, in_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def preprocess(image):
    """Resize to 256 x 256 with bilinear sampling, then scale to [0, 1]."""
    return resize_bilinear(image, 256, 256) / 255.0


def _to_uint8(values):
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def rotate(image, degrees):
    """Rotate about the canvas center by a multiple of 45 degrees."""
    img = _check_image(image)
    degrees = int(degrees) % 360
    if degrees not in ALLOWED_ROTATIONS:
        raise ValueError(f"rotation {degrees} is not a multiple of 45")
    if degrees == 0:
        return img.copy()
    if degrees % 90 == 0:
        # exact index permutation; k quarter-turns clockwise
        return np.rot90(img, k=-(degrees // 90)).copy()

    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.deg2rad(degrees)
    cos, sin = np.cos(rad), np.sin(rad)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = rr - cy
    dx = cc - cx
    src_x = cos * dx + sin * dy + cx
    src_y = -sin * dx + cos * dy + cy

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    out = np.zeros((h, w, 3), dtype=np.float64)
    fimg = img.astype(np.float64)
    for oy, ox, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ty = y0 + oy
        tx = x0 + ox
        valid = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        tyc = np.clip(ty, 0, h - 1)
        txc = np.clip(tx, 0, w - 1)
        out += (weight * valid)[:, :, None] * fimg[tyc, txc]
    return _to_uint8(out)


def flip_horizontal(image):
    """Mirror left-right (columns reversed)."""
    return _check_image(image)[:, ::-1].copy()


def rgb_to_hsv(rgb):
    """Hexcone RGB -> HSV on float arrays in [0, 1]; H in [0, 360)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    delta = v - rgb.min(axis=-1)
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sector = np.select(
            [delta == 0, v == r, v == g],
            [0.0, ((g - b) / delta) % 6.0, (b - r) / delta + 2.0],
            default=(r - g) / delta + 4.0,
        )
    return np.stack([60.0 * sector, s, v], axis=-1)


def hsv_to_rgb(hsv):
    """Hexcone HSV -> RGB inverse of :func:`rgb_to_hsv`."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = (h / 60.0) % 6.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    zero = np.zeros_like(c)
    sector = np.floor(hp).astype(np.int64) % 6
    r1 = np.choose(sector, [c, x, zero, zero, x, c])
    g1 = np.choose(sector, [x, c, c, x, zero, zero])
    b1 = np.choose(sector, [zero, zero, x, c, c, x])
    m = v - c
    return np.stack([r1 + m, g1 + m, b1 + m], axis=-1)


def adjust_brightness(image, factor):
    """Scale the HSV value channel by ``factor``, clipping at channel max.

    ``factor == 1.0`` returns an exact copy (the color-space round trip is
    bypassed so identity variants are bitwise-stable).
    """
    img = _check_image(image)
    if factor <= 0:
        raise ValueError("brightness factor must be positive")
    if factor == 1.0:
        return img.copy()
    hsv = rgb_to_hsv(img.astype(np.float64) / 255.0)
    hsv[..., 2] = np.minimum(hsv[..., 2] * factor, 1.0)
    return _to_uint8(hsv_to_rgb(hsv) * 255.0)


def augment(image, policy, include_identity=True):
    """All rotation x flip x brightness variants under ``policy``.

    Variants are ordered rotations ascending, then unflipped before
    flipped, then brightness factors ascending. With ``include_identity``
    false, the fully-identity variant (0 degrees, no flip, factor 1.0) is
    omitted; otherwise the output length equals
    ``len(rotations) * (1 + flip) * len(factors)``.
    """
    img = _check_image(image)
    out = []
    for degrees in policy.rotation_degrees:
        rotated = rotate(img, degrees)
        flips = (False, True) if policy.horizontal_flip else (False,)
        for flipped in flips:
            base = flip_horizontal(rotated) if flipped else rotated
            for factor in policy.brightness_factors:
                if not include_identity and degrees == 0 and not flipped and factor == 1.0:
                    continue
                out.append(adjust_brightness(base, factor))
    return out


def gridpool_features(tensor, grid=4):
    """Per-cell per-channel means over a g x g partition of the tensor.

    The tensor is (H, W, 3) float (normally the :func:`preprocess`
    output); rows/columns are split at ``i * H // g``. Feature order is
    cell-major (row-major cells), channels innermost, giving d = 3 g^2.
    """
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 3 or t.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) tensor, got shape {t.shape}")
    h, w = t.shape[:2]
    if grid < 1 or grid > h or grid > w:
        raise ValueError(f"grid {grid} incompatible with tensor {h}x{w}")
    feats = np.empty(3 * grid * grid, dtype=np.float64)
    idx = 0
    for i in range(grid):
        r0, r1 = i * h // grid, (i + 1) * h // grid
        for j in range(grid):
            c0, c1 = j * w // grid, (j + 1) * w // grid
            cell = t[r0:r1, c0:c1]
            for ch in range(3):
                feats[idx] = cell[:, :, ch].mean()
                idx += 1
    return feats


EXTRACTORS = {"gridpool": gridpool_features}


def extract_features(tensor, extractor_id, extractor_config=None):
    """Run a registered feature extractor on a preprocessed tensor.

    The built-in ``gridpool`` extractor takes ``{"grid": g}`` (default 4).
    Precomputed-feature manifests bypass this boundary entirely.
    """
    if extractor_id not in EXTRACTORS:
        raise ConfigError(f"unknown extractor {extractor_id!r}; known: {sorted(EXTRACTORS)}")
    cfg = dict(extractor_config or {})
    if extractor_id == "gridpool":
        return gridpool_features(tensor, grid=int(cfg.get("grid", 4)))
    return EXTRACTORS[extractor_id](tensor, **cfg)


def feature_length(extractor_id, extractor_config=None):
    """Feature dimension the extractor will produce."""
    if extractor_id not in EXTRACTORS:
        raise ConfigError(f"unknown extractor {extractor_id!r}; known: {sorted(EXTRACTORS)}")
    cfg = dict(extractor_config or {})
    grid = int(cfg.get("grid", 4))
    return 3 * grid * grid
