"""Depth providers: stereo pair (or frame index) -> DepthMap.

The classical provider is winner-take-all ZNCC block matching with parabolic
sub-pixel refinement and a left-right consistency check. Any learned backend
only has to implement the same ``provider(t, left, right) -> DepthMap`` call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import FormatError, InvalidInputError
from .formats import DepthMap, GrayImage, list_frames, read_depth_map
from .geometry import Intrinsics

# per-pixel intensity variance below this is treated as textureless
_MIN_VARIANCE = 1e-6


@dataclass(frozen=True)
class StereoParams:
    max_disparity: int = 128
    window_radius: int = 4
    zncc_threshold: float = 0.6
    lr_consistency_tol: float = 1.0
    min_disparity: int = 0

    def __post_init__(self):
        if self.max_disparity < 1:
            raise InvalidInputError("max_disparity must be >= 1")
        if not 0 <= self.min_disparity <= self.max_disparity:
            raise InvalidInputError("min_disparity must lie in [0, max_disparity]")
        if self.window_radius < 1:
            raise InvalidInputError("window_radius must be >= 1")
        if not -1.0 <= self.zncc_threshold <= 1.0:
            raise InvalidInputError("zncc_threshold must lie in [-1, 1]")


@dataclass
class DisparityMap:
    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.data.shape != self.valid.shape:
            raise ValueError("data and validity differ in shape")
        self.data = np.where(self.valid, self.data, 0.0)


_INVALID = -2.0  # below any ZNCC score


@njit(cache=True, error_model="numpy")
def _zncc_pair(L, R, r, mind, maxd):
    """Winner-take-all ZNCC for both views in one sweep over the cost volume.

    Returns best score / disparity / neighbour scores for the left view
    (match at x - d in R) and the right view (match at x + d in L). Window sums
    slide down the rows with one column-sum buffer per disparity; per row the
    scores form a (disparity, x) volume scanned by both argmaxes.
    """
    h, w = L.shape
    n = (2 * r + 1) ** 2
    nd = min(maxd, w - 2 * r - 1) - mind + 1
    out_bL = np.full((h, w), -np.inf)
    out_dL = np.full((h, w), -1, dtype=np.int64)
    out_mL = np.full((h, w), np.nan)
    out_pL = np.full((h, w), np.nan)
    out_bR = np.full((h, w), -np.inf)
    out_dR = np.full((h, w), -1, dtype=np.int64)
    out_mR = np.full((h, w), np.nan)
    out_pR = np.full((h, w), np.nan)
    if h < 2 * r + 1 or nd < 1:
        return out_bL, out_dL, out_mL, out_pL, out_bR, out_dR, out_mR, out_pR

    cL = np.zeros(w)
    cL2 = np.zeros(w)
    cR = np.zeros(w)
    cR2 = np.zeros(w)
    cP = np.zeros((nd, w))
    zero = np.zeros(w)
    for yy in range(2 * r):
        for x in range(w):
            cL[x] += L[yy, x]
            cL2[x] += L[yy, x] * L[yy, x]
            cR[x] += R[yy, x]
            cR2[x] += R[yy, x] * R[yy, x]
        for k in range(nd):
            d = mind + k
            for x in range(d, w):
                cP[k, x] += L[yy, x] * R[yy, x - d]

    meanL = np.zeros(w)
    meanR = np.zeros(w)
    isL = np.zeros(w)
    isR = np.zeros(w)
    vol = np.empty((nd, w))
    bestL = np.empty(w)
    bdL = np.empty(w, np.int64)
    bestR = np.empty(w)
    bdR = np.empty(w, np.int64)
    win = 2 * r + 1
    inv_n = 1.0 / n
    for y in range(r, h - r):
        add = y + r
        sub = y - r - 1
        La = L[add]
        Ra = R[add]
        Ls = L[sub] if sub >= 0 else zero
        Rs = R[sub] if sub >= 0 else zero
        for x in range(w):
            cL[x] += La[x] - Ls[x]
            cL2[x] += La[x] * La[x] - Ls[x] * Ls[x]
            cR[x] += Ra[x] - Rs[x]
            cR2[x] += Ra[x] * Ra[x] - Rs[x] * Rs[x]
        # window statistics; isL/isR = 0 marks textureless (or border) windows
        sl = 0.0
        sl2 = 0.0
        sr = 0.0
        sr2 = 0.0
        for x in range(win):
            sl += cL[x]
            sl2 += cL2[x]
            sr += cR[x]
            sr2 += cR2[x]
        for x in range(r, w - r):
            if x > r:
                sl += cL[x + r] - cL[x - r - 1]
                sl2 += cL2[x + r] - cL2[x - r - 1]
                sr += cR[x + r] - cR[x - r - 1]
                sr2 += cR2[x + r] - cR2[x - r - 1]
            meanL[x] = sl / n
            meanR[x] = sr / n
            vl = sl2 / n - (sl / n) ** 2
            vr = sr2 / n - (sr / n) ** 2
            isL[x] = 1.0 / math.sqrt(vl) if vl >= _MIN_VARIANCE else 0.0
            isR[x] = 1.0 / math.sqrt(vr) if vr >= _MIN_VARIANCE else 0.0
        for x in range(w):
            bestL[x] = _INVALID
            bdL[x] = -1
            bestR[x] = _INVALID
            bdR[x] = -1
        for k in range(nd):
            d = mind + k
            row = cP[k]
            vk = vol[k]
            for x in range(d, w):
                row[x] += La[x] * Ra[x - d] - Ls[x] * Rs[x - d]
            lo = r + d
            for x in range(min(lo, w)):
                vk[x] = _INVALID
            for x in range(max(w - r, lo), w):
                vk[x] = _INVALID
            if lo >= w - r:
                continue
            sp = 0.0
            for x in range(d, lo + r):
                sp += row[x]
            for x in range(lo, w - r):
                sp += row[x + r]
                s = isL[x] * isR[x - d]
                v = (sp * inv_n - meanL[x] * meanR[x - d]) * s
                v = v if s > 0.0 else _INVALID
                vk[x] = v
                up = v > bestL[x]
                bestL[x] = v if up else bestL[x]
                bdL[x] = k if up else bdL[x]
                sp -= row[x - r]
            for xr in range(lo - d, w - r - d):
                v = vk[xr + d]
                up = v > bestR[xr]
                bestR[xr] = v if up else bestR[xr]
                bdR[xr] = k if up else bdR[xr]
        for x in range(w):
            bd = bdL[x]
            if bd < 0:
                continue
            out_bL[y, x] = bestL[x]
            out_dL[y, x] = bd + mind
            if bd > 0 and vol[bd - 1, x] > _INVALID:
                out_mL[y, x] = vol[bd - 1, x]
            if bd < nd - 1 and vol[bd + 1, x] > _INVALID:
                out_pL[y, x] = vol[bd + 1, x]
            bd = bdR[x]
            if bd < 0:
                continue
        for xr in range(w):
            bd = bdR[xr]
            if bd < 0:
                continue
            out_bR[y, xr] = bestR[xr]
            out_dR[y, xr] = bd + mind
            xm = xr + mind + bd - 1
            if bd > 0 and vol[bd - 1, xm] > _INVALID:
                out_mR[y, xr] = vol[bd - 1, xm]
            if bd < nd - 1 and xm + 2 < w and vol[bd + 1, xm + 2] > _INVALID:
                out_pR[y, xr] = vol[bd + 1, xm + 2]
    return out_bL, out_dL, out_mL, out_pL, out_bR, out_dR, out_mR, out_pR


def _refine(best, d, sm, sp, threshold):
    valid = (d >= 0) & np.isfinite(best) & (best >= threshold)
    disp = d.astype(np.float64)
    ok = valid & np.isfinite(sm) & np.isfinite(sp)
    denom = sm - 2.0 * best + sp
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(ok & (denom < 0), 0.5 * (sm - sp) / np.where(denom < 0, denom, -1.0), 0.0)
    disp = disp + np.clip(off, -0.5, 0.5)
    return DisparityMap(np.where(valid, disp, 0.0), valid)


def _check_pair(left, right):
    L = left.data if isinstance(left, GrayImage) else np.asarray(left, float)
    R = right.data if isinstance(right, GrayImage) else np.asarray(right, float)
    if L.shape != R.shape:
        raise InvalidInputError(f"stereo images differ in size: {L.shape} vs {R.shape}")
    return np.ascontiguousarray(L, dtype=np.float64), np.ascontiguousarray(R, dtype=np.float64)


def estimate_disparity_pair(left, right, params=StereoParams()):
    """Left and right disparity maps from one cost-volume sweep."""
    L, R = _check_pair(left, right)
    bl, dl, ml, pl, br, dr, mr, pr = _zncc_pair(L, R, params.window_radius, params.min_disparity, params.max_disparity)
    return _refine(bl, dl, ml, pl, params.zncc_threshold), _refine(br, dr, mr, pr, params.zncc_threshold)


def estimate_disparity(left, right, params=StereoParams()) -> DisparityMap:
    return estimate_disparity_pair(left, right, params)[0]


def left_right_consistency_filter(dl: DisparityMap, dr: DisparityMap, tol: float) -> DisparityMap:
    """Keep a left pixel iff ``|dl(i,j) - dr(i - dl(i,j), j)| <= tol``."""
    if dl.data.shape != dr.data.shape:
        raise InvalidInputError("disparity maps differ in size")
    if math.isinf(tol):
        return DisparityMap(dl.data.copy(), dl.valid.copy())
    h, w = dl.data.shape
    jj, ii = np.nonzero(dl.valid)
    target = np.round(ii - dl.data[jj, ii]).astype(int)
    inside = (target >= 0) & (target < w)
    keep = np.zeros(len(ii), bool)
    t = np.clip(target, 0, w - 1)
    keep[inside] = dr.valid[jj[inside], t[inside]] & (np.abs(dl.data[jj[inside], ii[inside]] - dr.data[jj[inside], t[inside]]) <= tol)
    valid = np.zeros_like(dl.valid)
    valid[jj[keep], ii[keep]] = True
    return DisparityMap(dl.data, valid)


def disparity_to_depth(d: DisparityMap, K: Intrinsics) -> DepthMap:
    if K.baseline is None:
        raise InvalidInputError("intrinsics carry no stereo baseline")
    ok = d.valid & (d.data > 0)
    with np.errstate(divide="ignore"):
        z = np.where(ok, K.fx * K.baseline / np.where(ok, d.data, 1.0), 0.0)
    return DepthMap(z)


def depth_to_disparity(depth: DepthMap, K: Intrinsics) -> DisparityMap:
    if K.baseline is None:
        raise InvalidInputError("intrinsics carry no stereo baseline")
    z = depth.data.astype(np.float64)
    ok = z > 0
    return DisparityMap(np.where(ok, K.fx * K.baseline / np.where(ok, z, 1.0), 0.0), ok)


@njit(cache=True, error_model="numpy")
def _subpix(best, d, sm, sp, threshold):
    if d < 0 or not best >= threshold:
        return -1.0
    off = 0.0
    if np.isfinite(sm) and np.isfinite(sp):
        den = sm - 2.0 * best + sp
        if den < 0:
            off = min(max(0.5 * (sm - sp) / den, -0.5), 0.5)
    return d + off


@njit(cache=True, error_model="numpy")
def _depth_from_pair(bl, dl, ml, pl, br, dr, mr, pr, threshold, tol, fb):
    """Compiled twin of refine -> left-right check -> disparity_to_depth."""
    h, w = bl.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            a = _subpix(bl[y, x], dl[y, x], ml[y, x], pl[y, x], threshold)
            if a < 0:
                continue
            if tol != np.inf:
                xt = int(np.rint(x - a))
                if xt < 0 or xt >= w:
                    continue
                b = _subpix(br[y, xt], dr[y, xt], mr[y, xt], pr[y, xt], threshold)
                if b < 0 or abs(a - b) > tol:
                    continue
            if a > 0:
                out[y, x] = fb / a
    return out


class ZNCCDepthProvider:
    """Stereo pair -> depth through ZNCC matching and the left-right check."""

    def __init__(self, K: Intrinsics, params: StereoParams = StereoParams()):
        if K.baseline is None:
            raise InvalidInputError("ZNCC provider needs intrinsics with a baseline")
        self.K = K
        self.params = params

    def __call__(self, t, left, right) -> DepthMap:
        L, R = _check_pair(left, right)
        p = self.params
        raw = _zncc_pair(L, R, p.window_radius, p.min_disparity, p.max_disparity)
        return DepthMap(_depth_from_pair(*raw, p.zncc_threshold, p.lr_consistency_tol, self.K.fx * self.K.baseline))

    def reference(self, t, left, right) -> DepthMap:
        """Same result through the separate numpy stages."""
        dl, dr = estimate_disparity_pair(left, right, self.params)
        d = left_right_consistency_filter(dl, dr, self.params.lr_consistency_tol)
        return disparity_to_depth(d, self.K)


class FileDepthProvider:
    """Serves precomputed depth files (e.g. network output) in frame order."""

    def __init__(self, directory, png_scale=None):
        self.directory = directory
        self.png_scale = png_scale
        self.frames = dict(list_frames(directory))
        self.n_frames = max(self.frames) + 1 if self.frames else 0

    def __len__(self):
        return self.n_frames

    def __call__(self, t, left=None, right=None) -> DepthMap:
        if t not in self.frames:
            raise FormatError(f"missing depth for frame {t} in {self.directory}")
        return read_depth_map(self.frames[t], self.png_scale)

    def __iter__(self):
        for t in range(self.n_frames):
            yield self(t)


def file_depth_provider(directory, png_scale=None):
    return FileDepthProvider(directory, png_scale)


def make_provider(spec: str, K: Intrinsics, params: StereoParams = StereoParams()):
    """``"zncc"`` or ``"files:<dir>"``."""
    if spec == "zncc":
        return ZNCCDepthProvider(K, params)
    if spec.startswith("files:"):
        return FileDepthProvider(spec[len("files:"):])
    raise InvalidInputError(f"unknown depth provider {spec!r}")
