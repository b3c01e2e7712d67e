"""
`Losses` module
===============

Image matching losses and the composite training objectives.

Three matching losses are available, selected by name wherever a loss is
configured:

- ``l2``: mean squared intensity difference
- ``ncc``: one minus the mean patchwise normalized cross-correlation
- ``mind``: mean absolute difference of MIND descriptors

Each loss also exists as a tape primitive (see :py:func:`match_on_tape`) whose
adjoint is taken with respect to the registered image.

**Usage**

>>> import numpy as np
>>> from openlandmark.losses import l2_match, total_loss
>>> l2_match(np.zeros((4, 4)), np.ones((4, 4)))
1.0
>>> total_loss(0.5, 100.0, 0.005)
1.0
"""

import logging
from typing import Optional, Union

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from openlandmark.construct import Image, Mask, MindConfig, LossKind
from openlandmark.core import validation
from openlandmark.core.tape import Primitive, Tape, Var
from openlandmark.core import tape as tp

logger = logging.getLogger(__name__)

#: patches whose variance does not exceed this value contribute NCC = 0
NCC_VARIANCE_FLOOR = 1e-8

ImageLike = Union[Image, Mask, np.ndarray]


def _data(img: ImageLike) -> np.ndarray:
    if isinstance(img, (Image, Mask)):
        return img.data
    return np.asarray(img, dtype=np.float64)


def _pair(target: ImageLike, registered: ImageLike):
    t, r = _data(target), _data(registered)
    validation.extents_must_match(t, r, "target", "registered")
    return t, r


# ----------------------------------------------------------------
#                              L2
# ----------------------------------------------------------------


def l2_match(target: ImageLike, registered: ImageLike) -> float:
    """Mean squared difference between two images of the same extent."""
    t, r = _pair(target, registered)
    return float(np.mean((t - r) ** 2))


def _l2_vjp(g, ans, registered, target):
    return (-2.0 * g * (target - registered) / registered.size,)


L2 = Primitive(
    "l2_loss", lambda registered, target: np.asarray(l2_match(target, registered)), _l2_vjp
)


# ----------------------------------------------------------------
#                              NCC
# ----------------------------------------------------------------


def _ncc_terms(t: np.ndarray, r: np.ndarray, patch_size: int):
    wt = sliding_window_view(t, (patch_size, patch_size))
    wr = sliding_window_view(r, (patch_size, patch_size))
    a = wt - wt.mean(axis=(-2, -1), keepdims=True)
    b = wr - wr.mean(axis=(-2, -1), keepdims=True)
    n = patch_size * patch_size
    cov = (a * b).sum(axis=(-2, -1)) / n
    var_t = (a * a).sum(axis=(-2, -1)) / n
    var_r = (b * b).sum(axis=(-2, -1)) / n
    valid = (var_t > NCC_VARIANCE_FLOOR) & (var_r > NCC_VARIANCE_FLOOR)
    norm = np.sqrt(np.where(valid, var_t * var_r, 1.0))
    ncc = np.where(valid, cov / norm, 0.0)
    return a, b, var_r, norm, ncc, valid


def ncc_patch_map(target: ImageLike, registered: ImageLike, patch_size: int = 5) -> np.ndarray:
    """NCC of every valid patch centre, shape (H - p + 1, W - p + 1)."""
    t, r = _pair(target, registered)
    validation.patch_must_fit(patch_size, t.shape)
    return _ncc_terms(t, r, patch_size)[4]


def ncc_match(target: ImageLike, registered: ImageLike, patch_size: int = 5) -> float:
    """
    Patchwise normalized cross-correlation loss ``1 - mean(NCC)``.

    Only patch centres where the whole patch fits inside the image are used.
    Patches with (population) variance at most 1e-8 on either side count as NCC = 0.

    Parameters
    ----------
    target, registered : Image or 2D array
        images of the same extent
    patch_size : int
        odd patch size, at most the smallest image extent, by default 5

    Returns
    -------
    float
        loss in [0, 2]
    """
    return float(1.0 - np.mean(ncc_patch_map(target, registered, patch_size)))


def _ncc_vjp(g, ans, registered, target, patch_size):
    a, b, var_r, norm, ncc, valid = _ncc_terms(target, registered, patch_size)
    n = patch_size * patch_size
    g_ncc = np.where(valid, -g / ncc.size, 0.0)[..., None, None]
    safe_var_r = np.where(valid, var_r, 1.0)[..., None, None]
    contrib = g_ncc * (a / (n * norm[..., None, None]) - ncc[..., None, None] * b / (n * safe_var_r))
    grad = np.zeros_like(registered)
    hv, wv = ncc.shape
    for di in range(patch_size):
        for dj in range(patch_size):
            grad[di : di + hv, dj : dj + wv] += contrib[:, :, di, dj]
    return (grad,)


NCC = Primitive(
    "ncc_loss",
    lambda registered, target, patch_size: np.asarray(ncc_match(target, registered, patch_size)),
    _ncc_vjp,
)


# ----------------------------------------------------------------
#                              MIND
# ----------------------------------------------------------------


@njit(cache=True)
def _clamp(i, n):
    return min(max(i, 0), n - 1)


@njit(cache=True)
def _mind_stack(img, half, disp, floor):
    h, w = img.shape
    nr = disp.shape[0]
    n = (2 * half + 1) ** 2
    means = np.empty((h, w))
    var = np.empty((h, w))
    ssd = np.empty((nr, h, w))
    feats = np.empty((nr, h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for oy in range(-half, half + 1):
                for ox in range(-half, half + 1):
                    s += img[_clamp(y + oy, h), _clamp(x + ox, w)]
            mean = s / n
            s2 = 0.0
            for oy in range(-half, half + 1):
                for ox in range(-half, half + 1):
                    v = img[_clamp(y + oy, h), _clamp(x + ox, w)] - mean
                    s2 += v * v
            means[y, x] = mean
            var[y, x] = s2 / n
            for k in range(nr):
                rx = disp[k, 0]
                ry = disp[k, 1]
                acc = 0.0
                for oy in range(-half, half + 1):
                    for ox in range(-half, half + 1):
                        diff = (
                            img[_clamp(y + oy, h), _clamp(x + ox, w)]
                            - img[_clamp(y + ry + oy, h), _clamp(x + rx + ox, w)]
                        )
                        acc += diff * diff
                ssd[k, y, x] = acc
                feats[k, y, x] = np.exp(-acc / (var[y, x] + floor))
    return feats, ssd, var, means


@njit(cache=True)
def _mind_stack_vjp(img, half, disp, floor, feats, ssd, var, means, g_feats):
    h, w = img.shape
    nr = disp.shape[0]
    n = (2 * half + 1) ** 2
    grad = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            denom = var[y, x] + floor
            g_var = 0.0
            for k in range(nr):
                gf = g_feats[k, y, x]
                if gf == 0.0:
                    continue
                f = feats[k, y, x]
                g_ssd = -gf * f / denom
                g_var += gf * f * ssd[k, y, x] / (denom * denom)
                rx = disp[k, 0]
                ry = disp[k, 1]
                for oy in range(-half, half + 1):
                    for ox in range(-half, half + 1):
                        y1 = _clamp(y + oy, h)
                        x1 = _clamp(x + ox, w)
                        y2 = _clamp(y + ry + oy, h)
                        x2 = _clamp(x + rx + ox, w)
                        diff = img[y1, x1] - img[y2, x2]
                        grad[y1, x1] += 2.0 * diff * g_ssd
                        grad[y2, x2] -= 2.0 * diff * g_ssd
            if g_var != 0.0:
                for oy in range(-half, half + 1):
                    for ox in range(-half, half + 1):
                        y1 = _clamp(y + oy, h)
                        x1 = _clamp(x + ox, w)
                        grad[y1, x1] += g_var * 2.0 * (img[y1, x1] - means[y, x]) / n
    return grad


def _mind_args(cfg: MindConfig, shape):
    if len(shape) != 2:
        raise validation.UserInputError("MIND descriptors are only available for 2D images")
    validation.patch_must_fit(cfg.patch_size, shape, "MindConfig.patch_size")
    return cfg.patch_size // 2, cfg.displacement_array, float(cfg.variance_floor)


def mind_descriptor(img: ImageLike, cfg: Optional[MindConfig] = None) -> np.ndarray:
    """MIND descriptor stack, shape (len(R), H, W)."""
    cfg = cfg or MindConfig()
    data = np.ascontiguousarray(_data(img), dtype=np.float64)
    half, disp, floor = _mind_args(cfg, data.shape)
    return _mind_stack(data, half, disp, floor)[0]


def mind_feature(img: ImageLike, x, cfg: Optional[MindConfig] = None, r=None) -> float:
    """
    MIND descriptor of one pixel and one displacement.

    ``exp(-ssd / (var + variance_floor))`` where ssd compares the patch at x with the
    patch at x + r, var is the population variance of the patch at x, and patch
    coordinates are clamped to the image border.

    Parameters
    ----------
    img : Image or 2D array
    x : (int, int)
        pixel location (x = column, y = row)
    cfg : MindConfig, optional
    r : (int, int), optional
        displacement, by default the first one of ``cfg``

    Returns
    -------
    float
        value in (0, 1]
    """
    cfg = cfg or MindConfig()
    data = _data(img)
    _mind_args(cfg, data.shape)
    r = cfg.displacements[0] if r is None else r
    h, w = data.shape
    offsets = np.arange(-(cfg.patch_size // 2), cfg.patch_size // 2 + 1)
    px, py = int(x[0]), int(x[1])
    rows = np.clip(py + offsets, 0, h - 1)
    cols = np.clip(px + offsets, 0, w - 1)
    rows_r = np.clip(py + int(r[1]) + offsets, 0, h - 1)
    cols_r = np.clip(px + int(r[0]) + offsets, 0, w - 1)
    patch = data[np.ix_(rows, cols)]
    shifted = data[np.ix_(rows_r, cols_r)]
    ssd = float(np.sum((patch - shifted) ** 2))
    return float(np.exp(-ssd / (np.var(patch) + cfg.variance_floor)))


def mind_match(target: ImageLike, registered: ImageLike, cfg: Optional[MindConfig] = None) -> float:
    """Mean absolute MIND difference over every pixel and displacement."""
    t, r = _pair(target, registered)
    return float(np.mean(np.abs(mind_descriptor(t, cfg) - mind_descriptor(r, cfg))))


def _mind_vjp(g, ans, registered, target, cfg):
    data = np.ascontiguousarray(registered, dtype=np.float64)
    half, disp, floor = _mind_args(cfg, data.shape)
    feats, ssd, var, means = _mind_stack(data, half, disp, floor)
    target_feats = mind_descriptor(target, cfg)
    g_feats = -g * np.sign(target_feats - feats) / feats.size
    return (_mind_stack_vjp(data, half, disp, floor, feats, ssd, var, means, g_feats),)


MIND = Primitive(
    "mind_loss",
    lambda registered, target, cfg: np.asarray(mind_match(target, registered, cfg)),
    _mind_vjp,
)


# ----------------------------------------------------------------
#                        COMPOSITE LOSSES
# ----------------------------------------------------------------


def match_loss(
    kind: LossKind,
    target: ImageLike,
    registered: ImageLike,
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
) -> float:
    """Dispatches to the matching loss named ``kind``."""
    validation.str_must_be_one_of_those(kind, "loss kind", ["l2", "ncc", "mind"])
    if kind == "l2":
        return l2_match(target, registered)
    if kind == "ncc":
        return ncc_match(target, registered, ncc_patch)
    return mind_match(target, registered, mind)


def masked_match(
    target: ImageLike,
    registered: ImageLike,
    mask_t: ImageLike,
    mask_r: ImageLike,
    base: LossKind = "l2",
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
) -> float:
    """Base matching loss of the mask-weighted images ``mask_t * target``, ``mask_r * registered``."""
    t, r = _pair(target, registered)
    mt, mr = _data(mask_t), _data(mask_r)
    validation.extents_must_match(t, mt, "target", "target mask")
    validation.extents_must_match(r, mr, "registered", "registered mask")
    return match_loss(base, mt * t, mr * r, ncc_patch, mind)


def total_loss(match_value: float, kappa: float, lam: float) -> float:
    """``match + lam * kappa``."""
    if lam < 0:
        raise validation.UserInputError("lambda must be non-negative")
    return match_value + lam * kappa


def weak_loss(
    image_match: float,
    kappa: float,
    seg_match: Optional[float],
    lam: float,
    beta: float,
) -> float:
    """``total_loss`` plus ``beta * seg_match`` when both segmentations exist."""
    if beta < 0:
        raise validation.UserInputError("beta must be non-negative")
    loss = total_loss(image_match, kappa, lam)
    if seg_match is None:
        return loss
    return loss + beta * seg_match


def box_mask(shape, box, sigma: float = 2.0) -> Mask:
    """
    Box region of interest with a gaussian-blurred border.

    Parameters
    ----------
    shape : (int, int)
        image shape (rows, columns)
    box : (x0, y0, x1, y1)
        inclusive pixel bounds of the box
    sigma : float
        standard deviation of the gaussian blur in pixels, 0 for a hard box

    Returns
    -------
    Mask
    """
    x0, y0, x1, y1 = (int(v) for v in box)
    h, w = shape
    if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
        raise validation.UserInputError(f"mask box {box} does not fit in an image of shape {shape}")
    data = np.zeros(shape)
    data[y0 : y1 + 1, x0 : x1 + 1] = 1.0
    if sigma > 0:
        data = np.clip(gaussian_filter(data, sigma=sigma, mode="constant"), 0.0, 1.0)
    return Mask(data=data)


# ----------------------------------------------------------------
#                         TAPE VERSIONS
# ----------------------------------------------------------------


def match_on_tape(
    tape: Tape,
    kind: LossKind,
    target: np.ndarray,
    registered: Var,
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
) -> Var:
    """Records the matching loss of ``registered`` against a constant target."""
    validation.str_must_be_one_of_those(kind, "loss kind", ["l2", "ncc", "mind"])
    target = np.asarray(target, dtype=np.float64)
    validation.extents_must_match(target, registered.value, "target", "registered")
    if kind == "l2":
        return tape.apply(L2, registered, target=target)
    if kind == "ncc":
        validation.patch_must_fit(ncc_patch, target.shape, "ncc_patch")
        return tape.apply(NCC, registered, target=target, patch_size=ncc_patch)
    return tape.apply(MIND, registered, target=target, cfg=mind or MindConfig())


def masked_match_on_tape(
    tape: Tape,
    kind: LossKind,
    target: np.ndarray,
    registered: Var,
    mask_t: np.ndarray,
    mask_r: np.ndarray,
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
) -> Var:
    masked = tp.mul_const(tape, registered, np.asarray(mask_r, dtype=np.float64))
    return match_on_tape(tape, kind, mask_t * target, masked, ncc_patch, mind)
