"""Stage III (part 1): scale-invariant local features and image similarity.

The extractor follows Lowe's construction: a Gaussian scale space with three
scales per octave, difference-of-Gaussian extrema refined by a quadratic fit,
low-contrast and edge-like responses discarded, one or more dominant
orientations from a 36-bin gradient histogram, and a 4x4x8 gradient
histogram descriptor that is clamped at 0.2 and renormalized.

Image similarity averages a Gaussian kernel of descriptor distances over the
ratio-tested nearest-neighbour matches, in both directions.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_sigma, check_unit_interval
from .errors import ImageTooSmall, NoFeatures

TWO_PI = 2.0 * math.pi
DESCRIPTOR_SIZE = 128
MIN_IMAGE_SIDE = 16
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class GrayImage:
    """Row-major luminance image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-d luminance array, got shape {px.shape}")
        if min(px.shape) < 8:
            raise ImageTooSmall(f"image {px.shape[1]}x{px.shape[0]} is smaller than 8 pixels")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_array(cls, arr) -> "GrayImage":
        """Build from a gray or RGB(A) array, uint8 or float in [0, 1]."""
        a = np.asarray(arr)
        scale = 255.0 if a.dtype == np.uint8 else (65535.0 if a.dtype == np.uint16 else 1.0)
        a = a.astype(np.float64) / scale
        if a.ndim == 3:
            if a.shape[2] == 1:
                a = a[:, :, 0]
            else:
                r, g, b = LUMA_WEIGHTS
                a = r * a[:, :, 0] + g * a[:, :, 1] + b * a[:, :, 2]
        return cls(np.clip(a, 0.0, 1.0))


@dataclass(frozen=True)
class ExtractorParams:
    sigma: float = 1.6
    n_scales: int = 3
    contrast_threshold: float = 0.03
    edge_threshold: float = 10.0
    assumed_blur: float = 0.5
    border: int = 5
    ori_bins: int = 36
    ori_peak_ratio: float = 0.8
    desc_width: int = 4
    desc_bins: int = 8
    desc_clamp: float = 0.2
    max_keypoints: int = 0  # 0 keeps all; otherwise strongest by |response|
    upsample: bool = False


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass
class DescriptorSet:
    pid: Optional[int]
    keypoints: list = field(default_factory=list)
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, DESCRIPTOR_SIZE)))

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=np.float64).reshape(-1, DESCRIPTOR_SIZE)
        if len(d) != len(self.keypoints):
            raise ValueError(f"{len(self.keypoints)} keypoints but {len(d)} descriptors")
        self.descriptors = d

    def __len__(self) -> int:
        return len(self.keypoints)


@dataclass
class MatchSet:
    index_a: np.ndarray
    index_b: np.ndarray
    sq_distance: np.ndarray

    @property
    def n_matches(self) -> int:
        return len(self.index_a)

    @property
    def pairs(self) -> list:
        return [(int(i), int(j), float(d))
                for i, j, d in zip(self.index_a, self.index_b, self.sq_distance)]


# ---------------------------------------------------------------------------
# scale space
# ---------------------------------------------------------------------------

class _Octave:
    def __init__(self, gauss, sigmas):
        self.gauss = gauss            # (n_scales + 3, h, w)
        self.dog = np.diff(gauss, axis=0)
        self.sigmas = sigmas          # blur of each gauss layer, octave pixels
        self._grad = {}

    def gradient(self, layer):
        """Magnitude and angle (radians in [0, 2pi)) of a gauss layer."""
        if layer not in self._grad:
            g = np.pad(self.gauss[layer], 1, mode="edge")
            gx = g[1:-1, 2:] - g[1:-1, :-2]
            gy = g[2:, 1:-1] - g[:-2, 1:-1]
            self._grad[layer] = (np.hypot(gx, gy), np.arctan2(gy, gx) % TWO_PI)
        return self._grad[layer]


def _build_octaves(img, p: ExtractorParams):
    s = p.n_scales
    if p.upsample:
        img = np.kron(img, np.ones((2, 2)))
        blur0 = 2 * p.assumed_blur
    else:
        blur0 = p.assumed_blur
    base = gaussian_filter(img, math.sqrt(max(p.sigma ** 2 - blur0 ** 2, 0.01)), mode="nearest")
    k = 2.0 ** (1.0 / s)
    sigmas = [p.sigma * k ** i for i in range(s + 3)]
    incr = [0.0] + [math.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2) for i in range(1, s + 3)]
    n_oct = max(1, int(math.floor(math.log2(min(img.shape)))) - 3)
    octaves = []
    for _ in range(n_oct):
        layers = [base]
        for i in range(1, s + 3):
            layers.append(gaussian_filter(layers[-1], incr[i], mode="nearest"))
        octaves.append(_Octave(np.stack(layers), sigmas))
        base = layers[s][::2, ::2]
        if min(base.shape) < 2 * p.border + 3:
            break
    return octaves


def _refine(dog, layer, r, c, p: ExtractorParams):
    """Quadratic sub-pixel fit; returns (layer, r, c, offset, value) or None."""
    s = p.n_scales
    h, w = dog.shape[1:]
    for _ in range(5):
        cube = dog[layer - 1:layer + 2, r - 1:r + 2, c - 1:c + 2]
        grad = 0.5 * np.array([cube[1, 1, 2] - cube[1, 1, 0],
                               cube[1, 2, 1] - cube[1, 0, 1],
                               cube[2, 1, 1] - cube[0, 1, 1]])
        center = cube[1, 1, 1]
        dxx = cube[1, 1, 2] - 2 * center + cube[1, 1, 0]
        dyy = cube[1, 2, 1] - 2 * center + cube[1, 0, 1]
        dss = cube[2, 1, 1] - 2 * center + cube[0, 1, 1]
        dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
        dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
        dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            break
        c += int(round(offset[0]))
        r += int(round(offset[1]))
        layer += int(round(offset[2]))
        if not (1 <= layer <= s and p.border <= r < h - p.border and p.border <= c < w - p.border):
            return None
    else:
        return None
    value = center + 0.5 * float(grad @ offset)
    if abs(value) < p.contrast_threshold:
        return None
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    ratio = p.edge_threshold
    if det <= 0 or tr * tr * ratio >= (ratio + 1) ** 2 * det:
        return None
    return layer, r, c, offset, value


def _detect(octave: _Octave, p: ExtractorParams):
    dog = octave.dog
    s = p.n_scales
    pre = 0.5 * p.contrast_threshold
    mx = maximum_filter(dog, size=3, mode="nearest")
    mn = minimum_filter(dog, size=3, mode="nearest")
    cand = ((dog == mx) & (dog > pre)) | ((dog == mn) & (dog < -pre))
    cand[0] = cand[-1] = False
    b = p.border
    cand[:, :b, :] = cand[:, -b:, :] = False
    cand[:, :, :b] = cand[:, :, -b:] = False
    found = {}
    for layer, r, c in zip(*np.nonzero(cand[:s + 1])):
        res = _refine(dog, int(layer), int(r), int(c), p)
        if res is not None:
            key = res[:3]
            if key not in found:
                found[key] = res
    return [found[k] for k in sorted(found)]


def _smooth_circular(hist):
    return (6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1))
            + np.roll(hist, 2) + np.roll(hist, -2)) / 16.0


def _orientations(octave, layer, r, c, sigma_oct, p: ExtractorParams):
    mag, ang = octave.gradient(layer)
    h, w = mag.shape
    sw = 1.5 * sigma_oct
    rad = int(round(3 * sw))
    r0, r1 = max(r - rad, 1), min(r + rad, h - 2)
    c0, c1 = max(c - rad, 1), min(c + rad, w - 2)
    yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    wgt = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sw * sw))
    n = p.ori_bins
    bins = np.floor(ang[r0:r1 + 1, c0:c1 + 1] * n / TWO_PI).astype(int) % n
    hist = np.bincount(bins.ravel(), weights=(mag[r0:r1 + 1, c0:c1 + 1] * wgt).ravel(), minlength=n)
    hist = _smooth_circular(hist)
    peak = hist.max()
    if peak <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    out = []
    for i in np.flatnonzero((hist > left) & (hist > right) & (hist >= p.ori_peak_ratio * peak)):
        denom = left[i] - 2 * hist[i] + right[i]
        frac = 0.5 * (left[i] - right[i]) / denom if denom != 0 else 0.0
        theta = ((i + 0.5 + frac) * TWO_PI / n) % TWO_PI
        out.append(0.0 if theta >= TWO_PI else theta)
    return out


def _descriptor(octave, layer, yf, xf, sigma_oct, theta, p: ExtractorParams):
    mag, ang = octave.gradient(layer)
    h, w = mag.shape
    d, nb = p.desc_width, p.desc_bins
    hist_w = 3.0 * sigma_oct
    rad = int(round(hist_w * math.sqrt(2) * (d + 1) * 0.5))
    r, c = int(round(yf)), int(round(xf))
    r0, r1 = max(r - rad, 0), min(r + rad, h - 1)
    c0, c1 = max(c - rad, 0), min(c + rad, w - 1)
    yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    dy, dx = yy - yf, xx - xf
    ct, st = math.cos(theta), math.sin(theta)
    cr = (ct * dx + st * dy) / hist_w
    rr = (-st * dx + ct * dy) / hist_w
    rbin = rr + d / 2 - 0.5
    cbin = cr + d / 2 - 0.5
    keep = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    rbin, cbin, rr, cr = rbin[keep], cbin[keep], rr[keep], cr[keep]
    m = mag[r0:r1 + 1, c0:c1 + 1][keep]
    a = ang[r0:r1 + 1, c0:c1 + 1][keep]
    m = m * np.exp(-(rr * rr + cr * cr) / (2 * (0.5 * d) ** 2))
    obin = ((a - theta) % TWO_PI) * nb / TWO_PI

    ri, ci, oi = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - ri, cbin - ci, obin - oi
    size = (d + 2) * (d + 2) * nb
    idx, wts = [], []
    for dr_, wr in ((0, 1 - fr), (1, fr)):
        for dc_, wc in ((0, 1 - fc), (1, fc)):
            for do_, wo in ((0, 1 - fo), (1, fo)):
                idx.append(((ri + 1 + dr_) * (d + 2) + ci + 1 + dc_) * nb + (oi + do_) % nb)
                wts.append(m * wr * wc * wo)
    hist = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=size)
    vec = hist.reshape(d + 2, d + 2, nb)[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(vec)
    if norm <= 0:
        return None
    vec = np.minimum(vec / norm, p.desc_clamp)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else None


def extract_features(img, params: Optional[ExtractorParams] = None, pid=None) -> DescriptorSet:
    """Detect keypoints and compute unit-norm 128-d descriptors.

    Parameters
    ----------
    img : GrayImage or array-like
    params : ExtractorParams, optional
    pid : int, optional
        Image id carried on the returned set.

    Raises
    ------
    ImageTooSmall
        If the shorter image side is below 16 pixels.
    """
    p = params or ExtractorParams()
    if not isinstance(img, GrayImage):
        img = GrayImage.from_array(img)
    if min(img.width, img.height) < MIN_IMAGE_SIDE:
        raise ImageTooSmall(f"image {img.width}x{img.height}: shorter side must be >= {MIN_IMAGE_SIDE}")

    factor0 = 0.5 if p.upsample else 1.0
    octaves = _build_octaves(img.pixels, p)
    found = []
    for o, octave in enumerate(octaves):
        for layer, r, c, off, value in _detect(octave, p):
            found.append((abs(value), o, layer, r, c, off))
    if p.max_keypoints and len(found) > p.max_keypoints:
        order = sorted(range(len(found)), key=lambda i: (-found[i][0], i))
        found = [found[i] for i in sorted(order[:p.max_keypoints])]

    keypoints, descs = [], []
    for resp, o, layer, r, c, off in found:
        octave = octaves[o]
        sigma_oct = p.sigma * 2.0 ** ((layer + off[2]) / p.n_scales)
        yf, xf = r + off[1], c + off[0]
        to_img = factor0 * 2.0 ** o
        x = min(max(xf * to_img, 0.0), img.width - 1.0)
        y = min(max(yf * to_img, 0.0), img.height - 1.0)
        for theta in _orientations(octave, layer, r, c, sigma_oct, p):
            vec = _descriptor(octave, layer, yf, xf, sigma_oct, theta, p)
            if vec is None:
                continue
            keypoints.append(Keypoint(x, y, sigma_oct * to_img, theta, resp))
            descs.append(vec)
    desc = np.array(descs) if descs else np.zeros((0, DESCRIPTOR_SIZE))
    return DescriptorSet(pid, keypoints, desc)


# ---------------------------------------------------------------------------
# matching and similarity
# ---------------------------------------------------------------------------

def _check_nonempty(ds):
    if len(ds) == 0:
        raise NoFeatures(ds.pid)


def match_descriptors(a: DescriptorSet, b: DescriptorSet, ratio=0.8) -> MatchSet:
    """Exact nearest-neighbour matching of `a` into `b` with Lowe's ratio test.

    A match is kept when ``d1 < ratio * d2`` for the nearest and second
    nearest Euclidean distances; with a single candidate in `b` every
    descriptor of `a` matches it.
    """
    check_unit_interval(ratio, "ratio", low_open=True)
    _check_nonempty(a)
    _check_nonempty(b)
    A, B = a.descriptors, b.descriptors
    d2 = (np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :]
          - 2.0 * (A @ B.T))
    rows = np.arange(len(A))
    nn1 = np.argmin(d2, axis=1)
    exact1 = np.sum((A - B[nn1]) ** 2, axis=1)
    if len(B) == 1:
        keep = np.ones(len(A), dtype=bool)
    else:
        d2[rows, nn1] = np.inf
        nn2 = np.argmin(d2, axis=1)
        exact2 = np.sum((A - B[nn2]) ** 2, axis=1)
        keep = np.sqrt(exact1) < ratio * np.sqrt(exact2)
    return MatchSet(rows[keep], nn1[keep], exact1[keep])


def _directional_similarity(matches: MatchSet, sigma_d: float) -> float:
    if matches.n_matches == 0:
        return 0.0
    return float(np.mean(np.exp(-matches.sq_distance / (2.0 * sigma_d * sigma_d))))


def _canonical_key(ds: DescriptorSet):
    return (ds.pid is None, ds.pid if ds.pid is not None else 0, len(ds),
            ds.descriptors.tobytes())


def pair_similarity(a: DescriptorSet, b: DescriptorSet, sigma_d=0.4, ratio=0.8) -> float:
    """Symmetrized Gaussian-weighted match similarity in [0, 1].

    Each direction averages ``exp(-|d_a - d_b|^2 / (2 sigma_d^2))`` over its
    ratio-tested matches (0 when there are none); the result is the mean of
    both directions. Inputs are put in a canonical order first so the result
    is bitwise symmetric.
    """
    sigma_d = check_sigma(sigma_d, "sigma_d")
    _check_nonempty(a)
    _check_nonempty(b)
    if _canonical_key(b) < _canonical_key(a):
        a, b = b, a
    s_ab = _directional_similarity(match_descriptors(a, b, ratio), sigma_d)
    s_ba = _directional_similarity(match_descriptors(b, a, ratio), sigma_d)
    return min(1.0, max(0.0, 0.5 * (s_ab + s_ba)))


def similarity_matrix(sets, sigma_d=0.4, ratio=0.8, n_jobs=1) -> np.ndarray:
    """Pairwise :func:`pair_similarity` over `sets`, unit diagonal."""
    n = len(sets)
    S = np.eye(n)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def one(ij):
        i, j = ij
        return pair_similarity(sets[i], sets[j], sigma_d, ratio)

    if n_jobs and n_jobs > 1 and pairs:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            values = list(pool.map(one, pairs, chunksize=64))
    else:
        values = [one(ij) for ij in pairs]
    for (i, j), v in zip(pairs, values):
        S[i, j] = S[j, i] = v
    return S


class SiftExtractor(BaseEstimator, TransformerMixin):
    """Estimator front-end for :func:`extract_features`.

    ``transform`` maps a sequence of images (GrayImage or arrays) to a list of
    DescriptorSets. Stateless; ``fit`` only validates parameters.
    """

    def __init__(self, sigma=1.6, n_scales=3, contrast_threshold=0.03, edge_threshold=10.0,
                 max_keypoints=0, upsample=False, n_jobs=1):
        self.sigma = sigma
        self.n_scales = n_scales
        self.contrast_threshold = contrast_threshold
        self.edge_threshold = edge_threshold
        self.max_keypoints = max_keypoints
        self.upsample = upsample
        self.n_jobs = n_jobs

    def _params(self):
        return ExtractorParams(sigma=self.sigma, n_scales=self.n_scales,
                               contrast_threshold=self.contrast_threshold,
                               edge_threshold=self.edge_threshold,
                               max_keypoints=self.max_keypoints, upsample=self.upsample)

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def transform(self, X, pids=None):
        params = self._params()
        images = list(X)
        pids = list(pids) if pids is not None else [None] * len(images)

        def one(args):
            img, pid = args
            return extract_features(img, params, pid=pid)

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                return list(pool.map(one, zip(images, pids)))
        return [one(a) for a in zip(images, pids)]
