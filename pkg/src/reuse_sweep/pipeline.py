"""Desk-scale segmentation chain over small synthetic images.

The chain mirrors a normalize / segment / compare workflow: every task is
a pure function of its input payload and its bound parameters, so two
parameter sets that agree on the first k tasks' parameters produce
byte-identical intermediate payloads through task k.  That property is
what makes prefix reuse sound end to end.

Representations: images are (H, W, 3) uint8 arrays, masks and label maps
are (H, W) integer arrays with 0 as background.  Images serialize as
binary PPM (P6), label maps as 16-bit binary PGM (P5); inter-task
payloads carry both in a small length-prefixed container.

Fixed modeling choices, referenced by the task docstrings below:
    - grayscale is the integer mean of the three channels;
    - hysteresis and pre-watershed labeling use 8-connectivity;
    - the reconstruction seed is a 3x3 erosion of the current mask;
    - components larger than SPLIT_AREA pixels are candidates for
      distance-peak splitting; peaks are 5x5 local maxima of the
      distance transform at least PEAK_MIN_HEIGHT deep.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ExecutionError
from .params import ParameterSet, ParameterSpace
from .workflow import StageTemplate, TaskTemplate

SPLIT_AREA = 120
PEAK_MIN_HEIGHT = 2.0

_PAYLOAD_MAGIC = b"RTP1\n"

# Chain order; each parameter is consumed by exactly one task.
TASK_READS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("normalize", ()),
    ("background", ("B", "G", "R")),
    ("rbc", ("T1", "T2")),
    ("candidate", ("G1", "G2")),
    ("size_filter", ("minS", "maxS")),
    ("fill_holes", ("FH",)),
    ("morph_recon", ("RC",)),
    ("prewatershed", ("minSPL",)),
    ("watershed", ("WConn",)),
    ("final_filter", ("minSS", "maxSS")),
    ("dice", ()),
)

TASK_COSTS = {
    "normalize": 1.0,
    "background": 0.9,
    "rbc": 0.7,
    "candidate": 1.2,
    "size_filter": 0.5,
    "fill_holes": 0.8,
    "morph_recon": 1.6,
    "prewatershed": 0.4,
    "watershed": 1.8,
    "final_filter": 0.5,
    "dice": 0.3,
}

PARAMETER_ORDER = tuple(n for _, reads in TASK_READS for n in reads)


@dataclass(frozen=True)
class PipelineParams:
    """Concrete values for the full segmentation parameter group."""

    B: float
    G: float
    R: float
    T1: float
    T2: float
    G1: float
    G2: float
    minS: int
    maxS: int
    FH: str
    RC: str
    minSPL: int
    WConn: str
    minSS: int
    maxSS: int

    @classmethod
    def from_set(cls, space: ParameterSpace, pset: ParameterSet) -> "PipelineParams":
        values = dict(zip(space.names, space.values(pset)))
        return cls(**{f: values[f] for f in cls.__dataclass_fields__})

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def _structure(conn: str) -> np.ndarray:
    if conn == "4-conn":
        return ndimage.generate_binary_structure(2, 1)
    if conn == "8-conn":
        return ndimage.generate_binary_structure(2, 2)
    raise ConfigError(f"connectivity must be '4-conn' or '8-conn', got {conn!r}")


def grayscale(image: np.ndarray) -> np.ndarray:
    return (image[..., 0].astype(np.int32) + image[..., 1] + image[..., 2]) // 3


# --- synthetic fixture -------------------------------------------------------


def synth_image(seed: int, width: int, height: int, blob_count: int) -> np.ndarray:
    """Deterministic synthetic tissue tile.

    The canvas is a near-white gradient.  On it sit faint rectangular
    patches whose channel levels straddle the background-threshold range
    (so the detection thresholds decide whether they count as tissue),
    and elliptical blobs whose interior intensity dips toward the
    center.  Blob roles cycle so the whole parameter group has work to
    do: index 0 is a large blob, every fourth is small debris, every
    fifth has a bright vesicular core that leaves a hole, and some of
    the rest are reddish cells.  Every third blob is butted against its
    predecessor so touching pairs exist for peak splitting.
    """
    if width < 16 or height < 16:
        raise ConfigError("fixture images must be at least 16x16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    fx = xx / max(width - 1, 1)
    fy = yy / max(height - 1, 1)
    core = 246.0 + 6.0 * (0.5 * fx + 0.5 * fy)
    img = np.stack([core + 2.0 * fx, core, core + 3.0 * fy], axis=-1)
    img += rng.normal(0.0, 1.5, size=img.shape)

    # Blob roles: index 0 is big, then debris, reddish cells, and
    # vesicular (bright-core) nuclei cycle; the rest are plain nuclei.
    def role_of(i: int) -> str:
        if i == 0 and min(width, height) >= 48:
            return "big"
        if i % 4 == 3:
            return "debris"
        if i % 4 == 1:
            return "red"
        if i % 5 == 4:
            return "vesicular"
        return "nucleus"

    # Geometry first: blobs repel each other (rejection sampling) except
    # the deliberate touching pairs.
    placed: list[tuple[float, float, float]] = []  # (cx, cy, reach)
    blobs = []
    for i in range(blob_count):
        role = role_of(i)
        if role == "big":
            # Alone it sits between the two large size-filter levels.
            rx = rng.uniform(17.2, 18.6)
            ry = rng.uniform(17.2, 18.6)
        elif role == "debris":
            rx = ry = 2.0  # rendered as a 12-pixel rectangle below
        else:
            rx = rng.uniform(5.0, 8.5)
            ry = rng.uniform(5.0, 8.5)
        reach = max(rx, ry)
        margin = min(reach + 2.0, min(width, height) / 2.0 - 1.0)
        if placed and i % 3 == 2 and role != "debris":
            # Butt this blob against the previous one, at an angle that
            # keeps it clear of everything else.
            pcx, pcy, preach = placed[-1]
            d = 0.75 * (preach + reach)
            cx = cy = None
            for _ in range(40):
                angle = rng.uniform(0.0, 2 * np.pi)
                tx = float(np.clip(pcx + d * np.cos(angle), margin, width - margin))
                ty = float(np.clip(pcy + d * np.sin(angle), margin, height - margin))
                if all(
                    (tx - ox) ** 2 + (ty - oy) ** 2 >= (reach + oreach + 4.0) ** 2
                    for ox, oy, oreach in placed[:-1]
                ):
                    cx, cy = tx, ty
                    break
            if cx is None:
                cx, cy = tx, ty
        else:
            cx = cy = None
            for _ in range(80):
                tx = rng.uniform(margin, width - margin)
                ty = rng.uniform(margin, height - margin)
                if all(
                    (tx - ox) ** 2 + (ty - oy) ** 2 >= (reach + oreach + 4.0) ** 2
                    for ox, oy, oreach in placed
                ):
                    cx, cy = tx, ty
                    break
            if cx is None:  # crowded canvas: take the last try as-is
                cx, cy = tx, ty
        placed.append((cx, cy, reach))
        blobs.append((i, role, cx, cy, rx, ry, rng.uniform(0.0, np.pi)))

    # Faint patches whose channel levels straddle the detection-threshold
    # range; kept clear of the blobs.
    for _ in range(blob_count):
        pw = int(rng.integers(5, 9))
        ph = int(rng.integers(4, 8))
        levels = rng.uniform(221.0, 236.0, size=3)
        for _ in range(80):
            px = int(rng.integers(2, max(3, width - pw - 2)))
            py = int(rng.integers(2, max(3, height - ph - 2)))
            pcx, pcy = px + pw / 2.0, py + ph / 2.0
            if all(
                (pcx - ox) ** 2 + (pcy - oy) ** 2 >= (oreach + 7.0) ** 2
                for ox, oy, oreach in placed
            ):
                break
        img[py : py + ph, px : px + pw, :] = levels + rng.normal(
            0.0, 1.0, size=(ph, pw, 3)
        )

    nucleus_color = np.array([96.0, 72.0, 150.0])
    for i, role, cx, cy, rx, ry, theta in blobs:
        if role == "debris":
            # A 12-pixel rectangle: small enough for the lower size
            # thresholds to argue over, chunky enough to survive the
            # reconstruction erosion.
            w, h = (4, 3) if rng.random() < 0.5 else (3, 4)
            px = int(np.clip(round(cx), 2, width - w - 2))
            py = int(np.clip(round(cy), 2, height - h - 2))
            img[py : py + h, px : px + w, :] = nucleus_color * 0.8
            continue
        if role == "red":
            # Alternate mild and strong red so each ratio-threshold level
            # separates a different subset.
            if (i // 4) % 2 == 0:
                color = np.array([196.0, 72.0, 70.0])   # ratios ~2.8
            else:
                color = np.array([210.0, 39.0, 38.0])   # ratios ~5.5
        else:
            color = nucleus_color
        ct, st = np.cos(theta), np.sin(theta)
        dx, dy = xx - cx, yy - cy
        u = (dx * ct + dy * st) / rx
        v = (-dx * st + dy * ct) / ry
        r2 = u * u + v * v
        inside = r2 <= 1.0
        if role == "vesicular":
            # Bright core blending to white leaves a hole in the mask,
            # and a one-pixel diagonal channel lets 8- but not
            # 4-connected background flood reach it.
            t = np.clip(1.7 * (1.0 - r2), 0.0, 1.0)
            for c in range(3):
                channel = img[..., c]
                shade = color[c] + (255.0 - color[c]) * t
                channel[inside] = shade[inside]
            channel_px = (
                inside & (dx >= 0.5) & (np.abs(dx - dy) <= 0.5) & (r2 >= 0.1)
            )
            img[channel_px] = 255.0
        else:
            shade = 1.0 - 0.45 * (1.0 - r2)  # darker toward the center
            for c in range(3):
                channel = img[..., c]
                channel[inside] = color[c] * shade[inside]
        if role in ("big", "nucleus"):
            # Corner-touching 2x2 satellite: visible only to the
            # 8-connected variants of reconstruction and labeling.
            ys, xs = np.nonzero(inside)
            if len(xs):
                j = int(np.argmax(xs + ys))
                sx, sy = int(xs[j]) + 1, int(ys[j]) + 1
                if sx + 2 <= width and sy + 2 <= height:
                    img[sy : sy + 2, sx : sx + 2, :] = nucleus_color * 0.8
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# --- task operations ---------------------------------------------------------


def background_detect(image: np.ndarray, b: float, g: float, r: float) -> np.ndarray:
    """Foreground mask: a pixel is background iff every channel exceeds
    its threshold (b, g, r applied to the blue, green, red channels)."""
    blue = image[..., 2]
    green = image[..., 1]
    red = image[..., 0]
    background = (blue > b) & (green > g) & (red > r)
    return ~background


def rbc_discard(image: np.ndarray, mask: np.ndarray, t1: float, t2: float) -> np.ndarray:
    """Drop pixels whose red/blue ratio exceeds t1 and red/green exceeds t2."""
    red = image[..., 0].astype(np.float64)
    green = np.maximum(image[..., 1].astype(np.float64), 1.0)
    blue = np.maximum(image[..., 2].astype(np.float64), 1.0)
    reddish = (red / blue > t1) & (red / green > t2)
    return mask & ~reddish


def candidate_nuclei(image: np.ndarray, mask: np.ndarray, g1: float, g2: float) -> np.ndarray:
    """Hysteresis on inverted intensity inside the mask.

    Keeps 8-connected components of {inverted >= g2} that contain a seed
    pixel with inverted >= g1.
    """
    inv = 255 - grayscale(image)
    weak = (inv >= g2) & mask
    strong = (inv >= g1) & mask
    if not strong.any():
        return np.zeros_like(mask, dtype=bool)
    labels, n = ndimage.label(weak, structure=_structure("8-conn"))
    seeded = np.unique(labels[strong])
    seeded = seeded[seeded > 0]
    return np.isin(labels, seeded)


def fill_holes(mask: np.ndarray, conn: str) -> np.ndarray:
    """Fill background regions that cannot reach the border when flooded
    under the given connectivity."""
    background = ~mask.astype(bool)
    labels, _ = ndimage.label(background, structure=_structure(conn))
    border = np.unique(
        np.concatenate(
            [labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]]
        )
    )
    border = border[border > 0]
    holes = background & ~np.isin(labels, border)
    return mask.astype(bool) | holes


def grey_reconstruct(marker: np.ndarray, limit: np.ndarray, conn: str) -> np.ndarray:
    """Reconstruction by dilation: grow marker under the limit image."""
    if (marker > limit).any():
        raise ExecutionError("reconstruction marker exceeds its limit image")
    footprint = _structure(conn)
    current = marker.astype(np.int32)
    limit = limit.astype(np.int32)
    while True:
        grown = np.minimum(ndimage.grey_dilation(current, footprint=footprint), limit)
        if np.array_equal(grown, current):
            return current
        current = grown


def morph_recon(image: np.ndarray, mask: np.ndarray, conn: str) -> np.ndarray:
    """Opening by reconstruction of inverted intensity within the mask.

    The seed is a 3x3 erosion of the mask; grey reconstruction by
    dilation under ``conn`` recovers everything connected to seeds while
    dropping thin protrusions and slivers that do not survive erosion.
    """
    inv = 255 - grayscale(image)
    mask = mask.astype(bool)
    seed = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool))
    marker = np.where(seed, inv, 0)
    limit = np.where(mask, inv, 0)
    return grey_reconstruct(marker, limit, conn) > 0


def area_filter(labels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Keep labels whose pixel area lies in [lo, hi]; relabel densely."""
    labels = labels.astype(np.int32)
    if labels.max() == 0:
        return np.zeros_like(labels)
    areas = np.bincount(labels.ravel())
    out = np.zeros_like(labels)
    next_id = 1
    for old in range(1, len(areas)):
        if areas[old] and lo <= areas[old] <= hi:
            out[labels == old] = next_id
            next_id += 1
    return out


def prewatershed_filter(mask: np.ndarray, min_area: float) -> np.ndarray:
    """Drop 8-connected components smaller than ``min_area`` pixels."""
    labels, _ = ndimage.label(mask, structure=_structure("8-conn"))
    kept = area_filter(labels, min_area, mask.size)
    return kept > 0

def label_components(mask: np.ndarray, conn: str) -> np.ndarray:
    labels, _ = ndimage.label(mask.astype(bool), structure=_structure(conn))
    return labels.astype(np.int32)


def split_peaks(mask: np.ndarray, conn: str) -> np.ndarray:
    """Label under ``conn`` and split large components at distance peaks.

    A component larger than SPLIT_AREA whose distance transform has two
    or more peak plateaus (local maxima over a 5x5 window, at least
    PEAK_MIN_HEIGHT deep) is divided by nearest-peak assignment.
    """
    structure = _structure(conn)
    labels, n = ndimage.label(mask.astype(bool), structure=structure)
    out = np.zeros_like(labels, dtype=np.int32)
    next_id = 1
    for comp_id in range(1, n + 1):
        comp = labels == comp_id
        if comp.sum() <= SPLIT_AREA:
            out[comp] = next_id
            next_id += 1
            continue
        dist = ndimage.distance_transform_edt(comp)
        local_max = ndimage.maximum_filter(dist, footprint=np.ones((5, 5), bool))
        peaks = comp & (dist == local_max) & (dist >= PEAK_MIN_HEIGHT)
        peak_labels, peak_n = ndimage.label(peaks, structure=structure)
        if peak_n <= 1:
            out[comp] = next_id
            next_id += 1
            continue
        _, (iy, ix) = ndimage.distance_transform_edt(~peaks, return_indices=True)
        nearest = peak_labels[iy, ix]
        out[comp] = nearest[comp] + (next_id - 1)
        next_id += peak_n
    return out


def watershed_split(mask: np.ndarray, conn: str, min_area: float) -> np.ndarray:
    """Pre-filter small components, then peak-split the rest."""
    return split_peaks(prewatershed_filter(mask, min_area), conn)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice similarity of two binarized masks; 1.0 when both are empty."""
    if a.shape != b.shape:
        raise ExecutionError(f"dice shape mismatch: {a.shape} vs {b.shape}")
    fa = a > 0
    fb = b > 0
    total = int(fa.sum()) + int(fb.sum())
    if total == 0:
        return 1.0
    inter = int((fa & fb).sum())
    return 2.0 * inter / total


def run_chain(image: np.ndarray, values: dict) -> np.ndarray:
    """Run the whole chain as direct function calls; returns final labels."""
    mask = background_detect(image, values["B"], values["G"], values["R"])
    mask = rbc_discard(image, mask, values["T1"], values["T2"])
    mask = candidate_nuclei(image, mask, values["G1"], values["G2"])
    mask = area_filter(label_components(mask, "8-conn"), values["minS"], values["maxS"]) > 0
    mask = fill_holes(mask, values["FH"])
    mask = morph_recon(image, mask, values["RC"])
    mask = prewatershed_filter(mask, values["minSPL"])
    labels = split_peaks(mask, values["WConn"])
    return area_filter(labels, values["minSS"], values["maxSS"])


# --- serialization -----------------------------------------------------------


def image_to_ppm(image: np.ndarray) -> bytes:
    h, w, c = image.shape
    if c != 3 or image.dtype != np.uint8:
        raise ExecutionError("images serialize as 8-bit RGB")
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def image_from_ppm(blob: bytes) -> np.ndarray:
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ExecutionError("not an 8-bit P6 pixmap")
    w, h = (int(x) for x in dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def labels_to_pgm(labels: np.ndarray) -> bytes:
    h, w = labels.shape
    data = labels.astype(">u2")
    return b"P5\n%d %d\n65535\n" % (w, h) + data.tobytes()


def labels_from_pgm(blob: bytes) -> np.ndarray:
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    if magic != b"P5" or maxval != b"65535":
        raise ExecutionError("not a 16-bit P5 graymap")
    w, h = (int(x) for x in dims.split())
    data = np.frombuffer(rest, dtype=">u2", count=w * h).reshape(h, w)
    return data.astype(np.int32)


def pack_payload(image: np.ndarray | None = None,
                 labels: np.ndarray | None = None) -> bytes:
    img_b = image_to_ppm(image) if image is not None else b""
    lab_b = labels_to_pgm(labels) if labels is not None else b""
    return _PAYLOAD_MAGIC + struct.pack(">II", len(img_b), len(lab_b)) + img_b + lab_b


def unpack_payload(blob: bytes) -> tuple[np.ndarray | None, np.ndarray | None]:
    if blob[:5] != _PAYLOAD_MAGIC:
        raise ExecutionError("not a pipeline payload")
    img_len, lab_len = struct.unpack(">II", blob[5:13])
    img_b = blob[13 : 13 + img_len]
    lab_b = blob[13 + img_len : 13 + img_len + lab_len]
    image = image_from_ppm(img_b) if img_len else None
    labels = labels_from_pgm(lab_b) if lab_len else None
    return image, labels


def _ppm_bytes(width: int, height: int) -> int:
    return len(b"P6\n%d %d\n255\n" % (width, height)) + 3 * width * height


def _pgm_bytes(width: int, height: int) -> int:
    return len(b"P5\n%d %d\n65535\n" % (width, height)) + 2 * width * height


def payload_bytes(width: int, height: int, with_image: bool, with_labels: bool) -> int:
    total = len(_PAYLOAD_MAGIC) + 8
    if with_image:
        total += _ppm_bytes(width, height)
    if with_labels:
        total += _pgm_bytes(width, height)
    return total


# --- stage template and executor --------------------------------------------

# Which payload sections each task emits; the image rides along only while
# a downstream task still reads pixels (rbc, candidate, morph_recon).
_EMITS = {
    "normalize": (True, False),
    "background": (True, True),
    "rbc": (True, True),
    "candidate": (True, True),
    "size_filter": (True, True),
    "fill_holes": (True, True),
    "morph_recon": (False, True),
    "prewatershed": (False, True),
    "watershed": (False, True),
    "final_filter": (False, True),
}


def build_stage_template(width: int, height: int) -> StageTemplate:
    """The bundled chain with exact per-task output sizes for these dims."""
    tasks = []
    previous = None
    for task_id, reads in TASK_READS:
        if task_id == "dice":
            out = 8  # one big-endian float64
        else:
            with_image, with_labels = _EMITS[task_id]
            out = payload_bytes(width, height, with_image, with_labels)
        tasks.append(
            TaskTemplate(
                id=task_id,
                reads=reads,
                inputs=(previous,) if previous else (),
                cost=TASK_COSTS[task_id],
                out_bytes=out,
            )
        )
        previous = task_id
    return StageTemplate(tuple(tasks), terminal="dice")


class PipelineExecutor:
    """Maps task ids to pipeline operations over serialized payloads.

    Holds the fixture image and the reference labels (the chain's result
    under the space defaults) that the terminal comparison scores
    against.  Stateless per call and safe for concurrent use.
    """

    def __init__(self, image: np.ndarray, reference_labels: np.ndarray):
        self._image_payload = pack_payload(image=image)
        self._reference = reference_labels

    def __call__(self, task: TaskTemplate, params: dict, inputs: list[bytes]) -> bytes:
        tid = task.id
        if tid == "normalize":
            return self._image_payload
        image, labels = unpack_payload(inputs[0])
        if tid == "background":
            mask = background_detect(image, params["B"], params["G"], params["R"])
            return pack_payload(image=image, labels=mask.astype(np.int32))
        if tid == "rbc":
            mask = rbc_discard(image, labels > 0, params["T1"], params["T2"])
            return pack_payload(image=image, labels=mask.astype(np.int32))
        if tid == "candidate":
            mask = candidate_nuclei(image, labels > 0, params["G1"], params["G2"])
            return pack_payload(image=image, labels=mask.astype(np.int32))
        if tid == "size_filter":
            kept = area_filter(
                label_components(labels > 0, "8-conn"), params["minS"], params["maxS"]
            )
            return pack_payload(image=image, labels=(kept > 0).astype(np.int32))
        if tid == "fill_holes":
            mask = fill_holes(labels > 0, params["FH"])
            return pack_payload(image=image, labels=mask.astype(np.int32))
        if tid == "morph_recon":
            mask = morph_recon(image, labels > 0, params["RC"])
            return pack_payload(labels=mask.astype(np.int32))
        if tid == "prewatershed":
            mask = prewatershed_filter(labels > 0, params["minSPL"])
            return pack_payload(labels=mask.astype(np.int32))
        if tid == "watershed":
            return pack_payload(labels=split_peaks(labels > 0, params["WConn"]))
        if tid == "final_filter":
            return pack_payload(labels=area_filter(labels, params["minSS"], params["maxSS"]))
        if tid == "dice":
            return struct.pack(">d", dice(labels, self._reference))
        raise ExecutionError(f"executor knows no task {tid!r}")


def dice_from_payload(payload: bytes) -> float:
    (value,) = struct.unpack(">d", payload)
    return value


def reference_labels(image: np.ndarray, space: ParameterSpace) -> np.ndarray:
    """Chain output under the space's default parameter values."""
    values = dict(zip(space.names, space.values(space.default_set())))
    return run_chain(image, values)
