"""Procedural part-labeled shapes (chair, table, lamp) and paired edits."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidEditError, InvalidParamsError, UnknownCategoryError
from .geometry import PointCloud, normalize, normalize_transform, save_pcb1, load_pcb1
from .prompts import N_TEMPLATES, render_prompt, tokenize

DEFAULT_POINTS = 256

# global label registry; every category draws part ids from here
PART_LABELS = {
    "seat": 0,
    "back": 1,
    "leg": 2,
    "arm": 3,
    "top": 4,
    "support": 5,
    "base": 6,
    "tube": 7,
    "shade": 8,
}
_LABEL_PARTS = {v: k for k, v in PART_LABELS.items()}

# part order also fixes the point-index layout of synthesized clouds
CATEGORY_PARTS = {
    "chair": ("seat", "back", "leg", "arm"),
    "table": ("top", "leg", "support"),
    "lamp": ("base", "tube", "shade"),
}
OPTIONAL_PARTS = {
    "chair": ("arm",),
    "table": ("support",),
    "lamp": (),
}

NOMINALS: dict[str, dict[tuple[str, str], float]] = {
    "chair": {
        ("seat", "width"): 1.0,
        ("seat", "depth"): 1.0,
        ("seat", "thickness"): 0.12,
        ("back", "height"): 0.9,
        ("back", "thickness"): 0.08,
        ("leg", "length"): 0.8,
        ("leg", "thickness"): 0.05,
        ("arm", "thickness"): 0.08,
    },
    "table": {
        ("top", "width"): 1.3,
        ("top", "depth"): 0.9,
        ("top", "thickness"): 0.08,
        ("leg", "length"): 0.75,
        ("leg", "thickness"): 0.045,
    },
    "lamp": {
        ("base", "radius"): 0.30,
        ("base", "height"): 0.07,
        ("tube", "length"): 1.0,
        ("tube", "radius"): 0.05,
        ("shade", "radius"): 0.30,
        ("shade", "height"): 0.25,
    },
}

SAMPLE_RANGE = (0.5, 1.5)      # sampling, relative to nominal
EDIT_RANGE = (0.25, 2.25)      # after an edit, relative to nominal
EDIT_FACTORS = (0.5, 0.67, 1.5, 2.0)
_PRESENCE_P = 0.6              # probability an optional part is instantiated

# fixed layout constants (not editable attributes)
_LEG_INSET = {"chair": 0.10, "table": 0.09}
_ARM_HEIGHT = 0.32
_ARM_LENGTH_FRAC = 0.58        # of seat depth
_STRETCHER_CROSS = 0.07
_STRETCHER_DROP = 0.72         # of leg length below the table top


@dataclass(frozen=True)
class ShapeParams:
    """Sampled attribute values plus the instantiated part list."""

    category: str
    attributes: dict[tuple[str, str], float]
    parts: tuple[str, ...]

    def value(self, part: str, attribute: str) -> float:
        return self.attributes[(part, attribute)]


@dataclass(frozen=True)
class EditDescriptor:
    """Ground truth behind a prompt; factor is ignored for remove."""

    category: str
    part: str
    attribute: str | None
    direction: str
    factor: float = 1.0


@dataclass
class EditTriplet:
    source: PointCloud
    target: PointCloud
    mask: np.ndarray
    prompt: np.ndarray
    prompt_text: str
    descriptor: EditDescriptor
    split: str = "train"


def _check_category(category: str) -> None:
    if category not in CATEGORY_PARTS:
        raise UnknownCategoryError(f"unknown category {category!r}")


def category_of_labels(labels: np.ndarray) -> str:
    """Infer the category from a labeled cloud; anchor parts are unique."""
    present = set(int(v) for v in np.unique(labels))
    if PART_LABELS["seat"] in present:
        return "chair"
    if PART_LABELS["top"] in present:
        return "table"
    if PART_LABELS["base"] in present:
        return "lamp"
    raise UnknownCategoryError(f"labels {sorted(present)} match no category")


def sample_params(category: str, seed: int) -> ShapeParams:
    _check_category(category)
    rng = np.random.default_rng(np.random.SeedSequence([0x5A17, seed]))
    lo, hi = SAMPLE_RANGE
    attributes = {}
    for key, nominal in NOMINALS[category].items():
        attributes[key] = float(rng.uniform(lo * nominal, hi * nominal))
    parts = []
    for part in CATEGORY_PARTS[category]:
        if part in OPTIONAL_PARTS[category] and rng.random() >= _PRESENCE_P:
            continue
        parts.append(part)
    attributes = {k: v for k, v in attributes.items() if k[0] in parts}
    return ShapeParams(category=category, attributes=attributes, parts=tuple(parts))


# ---------------------------------------------------------------- primitives

# box: ("box", lo(3,), hi(3,)); cyl: ("cyl", cx, cy, z0, z1, r, cap_lo, cap_hi)


def _box(lo: Sequence[float], hi: Sequence[float]) -> tuple:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise InvalidParamsError(f"degenerate box extents {hi - lo}")
    return ("box", lo, hi)


def _cyl(cx: float, cy: float, z0: float, z1: float, r: float,
         cap_lo: bool = True, cap_hi: bool = True) -> tuple:
    if z1 <= z0 or r <= 0.0:
        raise InvalidParamsError(f"degenerate cylinder (h={z1 - z0}, r={r})")
    return ("cyl", cx, cy, z0, z1, r, cap_lo, cap_hi)


def _prim_area(prim: tuple) -> float:
    if prim[0] == "box":
        w, d, h = prim[2] - prim[1]
        return 2.0 * (w * d + w * h + d * h)
    _, _, _, z0, z1, r, cap_lo, cap_hi = prim
    area = 2.0 * np.pi * r * (z1 - z0)
    area += np.pi * r * r * (int(cap_lo) + int(cap_hi))
    return float(area)


def _alloc(n: int, areas: np.ndarray, floor) -> np.ndarray:
    """Largest-remainder split of n by area with per-slot minimums.

    The minimums keep every face and cap populated so their exact
    planes stay readable; they are dropped when n cannot honor them.
    """
    floors = np.broadcast_to(np.asarray(floor, dtype=int), areas.shape).copy()
    if int(floors.sum()) > n:
        floors[:] = 0
    spare = n - int(floors.sum())
    quotas = spare * areas / areas.sum()
    counts = np.floor(quotas).astype(int)
    remainder = quotas - counts
    for i in np.argsort(-remainder)[: spare - int(counts.sum())]:
        counts[i] += 1
    return counts + floors


def _face_uv(path: tuple[int, ...], count: int) -> np.ndarray:
    # one (count, 2) draw per face stream: point i always consumes stream
    # values 2i and 2i+1, so indices survive count changes prefix-stably
    rng = np.random.default_rng(np.random.SeedSequence(list(path)))
    return rng.random((count, 2))


def _sample_box(prim: tuple, n: int, path: tuple[int, ...]) -> np.ndarray:
    lo, hi = prim[1], prim[2]
    w, d, h = hi - lo
    # faces: -x, +x, -y, +y, -z, +z
    areas = np.array([d * h, d * h, w * h, w * h, w * d, w * d])
    counts = _alloc(n, areas, 2)
    pts = np.empty((n, 3), dtype=np.float64)
    start = 0
    for f, count in enumerate(counts):
        if count == 0:
            continue
        block = slice(start, start + count)
        start += count
        axis = f // 2
        side = f % 2
        others = [a for a in range(3) if a != axis]
        uv = _face_uv(path + (f,), count)
        pts[block, axis] = lo[axis] if side == 0 else hi[axis]
        pts[block, others[0]] = lo[others[0]] + uv[:, 0] * (hi[others[0]] - lo[others[0]])
        pts[block, others[1]] = lo[others[1]] + uv[:, 1] * (hi[others[1]] - lo[others[1]])
    return pts


def _sample_cyl(prim: tuple, n: int, path: tuple[int, ...]) -> np.ndarray:
    _, cx, cy, z0, z1, r, cap_lo, cap_hi = prim
    lateral = 2.0 * np.pi * r * (z1 - z0)
    cap = np.pi * r * r
    areas = np.array([lateral, cap if cap_lo else 0.0, cap if cap_hi else 0.0])
    counts = _alloc(n, areas, np.where(areas > 0.0, 2, 0))
    pts = np.empty((n, 3), dtype=np.float64)
    start = 0
    for seg_id, count in enumerate(counts):
        if count == 0:
            continue
        block = slice(start, start + count)
        start += count
        uv = _face_uv(path + (seg_id,), count)
        theta = uv[:, 0] * 2.0 * np.pi
        u = uv[:, 1]
        if seg_id == 0:
            pts[block, 0] = cx + r * np.cos(theta)
            pts[block, 1] = cy + r * np.sin(theta)
            pts[block, 2] = z0 + u * (z1 - z0)
        else:
            rho = r * np.sqrt(u)
            pts[block, 0] = cx + rho * np.cos(theta)
            pts[block, 1] = cy + rho * np.sin(theta)
            pts[block, 2] = z0 if seg_id == 1 else z1
    return pts


def _prim_floor(prim: tuple) -> int:
    if prim[0] == "box":
        return 12
    return 2 * (1 + int(prim[6]) + int(prim[7]))


def _sample_prims(prims: list[tuple], n: int, path: tuple[int, ...]) -> np.ndarray:
    areas = np.array([_prim_area(p) for p in prims])
    floors = np.array([_prim_floor(p) for p in prims])
    counts = _alloc(n, areas, floors)
    pts = np.empty((n, 3), dtype=np.float64)
    start = 0
    for i, (prim, count) in enumerate(zip(prims, counts)):
        if count == 0:
            continue
        block = slice(start, start + count)
        start += count
        if prim[0] == "box":
            pts[block] = _sample_box(prim, count, path + (i,))
        else:
            pts[block] = _sample_cyl(prim, count, path + (i,))
    return pts


# ------------------------------------------------------------------- layout


def _layout(params: ShapeParams) -> dict[str, list[tuple]]:
    """Axis-aligned primitives per part; placements anchor shared interfaces."""
    v = params.value
    out: dict[str, list[tuple]] = {}
    if params.category == "chair":
        w, d, th = v("seat", "width"), v("seat", "depth"), v("seat", "thickness")
        out["seat"] = [_box((-w / 2, -d / 2, -th), (w / 2, d / 2, 0.0))]
        bh, bt = v("back", "height"), v("back", "thickness")
        out["back"] = [_box((-w / 2, d / 2 - bt, 0.0), (w / 2, d / 2, bh))]
        ll, lt = v("leg", "length"), v("leg", "thickness")
        xo, yo = w / 2 - _LEG_INSET["chair"], d / 2 - _LEG_INSET["chair"]
        out["leg"] = [
            _cyl(sx * xo, sy * yo, -th - ll, -th, lt)
            for sx in (-1, 1) for sy in (-1, 1)
        ]
        if "arm" in params.parts:
            at = v("arm", "thickness")
            la = _ARM_LENGTH_FRAC * d
            out["arm"] = [
                _box((w / 2 - at, -la / 2, 0.0), (w / 2, la / 2, _ARM_HEIGHT)),
                _box((-w / 2, -la / 2, 0.0), (-w / 2 + at, la / 2, _ARM_HEIGHT)),
            ]
    elif params.category == "table":
        w, d, th = v("top", "width"), v("top", "depth"), v("top", "thickness")
        out["top"] = [_box((-w / 2, -d / 2, -th), (w / 2, d / 2, 0.0))]
        ll, lt = v("leg", "length"), v("leg", "thickness")
        xo, yo = w / 2 - _LEG_INSET["table"], d / 2 - _LEG_INSET["table"]
        out["leg"] = [
            _cyl(sx * xo, sy * yo, -th - ll, -th, lt)
            for sx in (-1, 1) for sy in (-1, 1)
        ]
        if "support" in params.parts:
            c = _STRETCHER_CROSS / 2
            zc = -th - _STRETCHER_DROP * ll
            out["support"] = [
                _box((xo - c, -yo, zc - c), (xo + c, yo, zc + c)),
                _box((-xo - c, -yo, zc - c), (-xo + c, yo, zc + c)),
                _box((-xo, -c, zc - c), (xo, c, zc + c)),
            ]
    elif params.category == "lamp":
        br, bh = v("base", "radius"), v("base", "height")
        out["base"] = [_cyl(0.0, 0.0, -bh, 0.0, br)]
        tl, tr = v("tube", "length"), v("tube", "radius")
        out["tube"] = [_cyl(0.0, 0.0, 0.0, tl, tr)]
        sr, sh = v("shade", "radius"), v("shade", "height")
        out["shade"] = [_cyl(0.0, 0.0, tl - sh / 2, tl + sh / 2, sr)]
    else:
        raise UnknownCategoryError(f"unknown category {params.category!r}")
    return out


_PART_FLOOR = 32
_PRIM_FLOOR = 8


def part_floors(layout: dict[str, list[tuple]], k: int) -> dict[str, int]:
    """Minimum counts: a base per part plus a bump per extra primitive,
    scaled down if they would crowd out the area-driven remainder."""
    floors = {
        part: _PART_FLOOR + _PRIM_FLOOR * (len(prims) - 1)
        for part, prims in layout.items()
    }
    budget = 2 * k // 3
    total = sum(floors.values())
    if total > budget:
        floors = {p: f * budget // total for p, f in floors.items()}
    return floors


def part_point_counts(layout: dict[str, list[tuple]], k: int) -> dict[str, int]:
    """Floor allocation per part, remainder largest-remainder by area.

    The floors keep thin parts measurable by the attribute estimators;
    the rest follows surface area so density stays roughly uniform.
    """
    parts = list(layout)
    floors = part_floors(layout, k)
    areas = np.array([sum(_prim_area(p) for p in layout[part]) for part in parts])
    spare = k - sum(floors.values())
    quotas = spare * areas / areas.sum()
    counts = np.floor(quotas).astype(int)
    remainder = quotas - counts
    short = spare - int(counts.sum())
    for i in np.argsort(-remainder)[:short]:
        counts[i] += 1
    return dict(zip(parts, (int(c) + floors[p] for p, c in zip(parts, counts))))


def _points_for_layout(
    layout: dict[str, list[tuple]], counts: dict[str, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Canonical per-part streams: index i of a part is the same surface
    sample on every shape, so one layout index means one location corpus
    wide and unedited parts stay bit-identical across an edit."""
    chunks = []
    labels = []
    for part, prims in layout.items():
        n = counts[part]
        if n == 0:
            continue
        chunks.append(_sample_prims(prims, n, (0x0C10, PART_LABELS[part])))
        labels.append(np.full(n, PART_LABELS[part], dtype=np.uint8))
    return np.concatenate(chunks, axis=0), np.concatenate(labels)


def synthesize_raw(params: ShapeParams, k: int = DEFAULT_POINTS,
                   seed: int = 0) -> PointCloud:
    """Area-proportional surface samples in model units, before normalization.

    The cloud is a deterministic function of (params, k): sample streams
    are keyed by part and primitive alone, which keeps the point layout
    canonical across shapes. The seed argument is kept for interface
    stability and does not perturb the geometry.
    """
    if k < 64:
        raise InvalidParamsError(f"need at least 64 points, got {k}")
    layout = _layout(params)
    counts = part_point_counts(layout, k)
    points, labels = _points_for_layout(layout, counts)
    return PointCloud(points, labels)


def synthesize(params: ShapeParams, k: int = DEFAULT_POINTS,
               seed: int = 0) -> PointCloud:
    return normalize(synthesize_raw(params, k, seed))


# -------------------------------------------------------------------- edits


def edit_options(params: ShapeParams) -> list[EditDescriptor]:
    """All single-attribute edits valid for these params, in a fixed order."""
    out = []
    for part, attribute in NOMINALS[params.category]:
        if part not in params.parts:
            continue
        for direction in ("increase", "decrease"):
            out.append(EditDescriptor(params.category, part, attribute, direction))
    for part in OPTIONAL_PARTS[params.category]:
        if part in params.parts:
            out.append(EditDescriptor(params.category, part, None, "remove"))
    return out


def allowed_factors(params: ShapeParams, part: str, attribute: str,
                    direction: str) -> list[float]:
    value = params.value(part, attribute)
    nominal = NOMINALS[params.category][(part, attribute)]
    lo, hi = EDIT_RANGE
    want_bigger = direction == "increase"
    out = []
    for f in EDIT_FACTORS:
        if (f > 1.0) != want_bigger:
            continue
        if lo * nominal <= f * value <= hi * nominal:
            out.append(f)
    return out


def _validate_edit(params: ShapeParams, descriptor: EditDescriptor) -> None:
    if descriptor.category != params.category:
        raise InvalidEditError(
            f"descriptor category {descriptor.category!r} does not match "
            f"params category {params.category!r}"
        )
    if descriptor.direction == "remove":
        if descriptor.part not in OPTIONAL_PARTS[params.category]:
            raise InvalidEditError(f"cannot remove mandatory part {descriptor.part!r}")
        if descriptor.part not in params.parts:
            raise InvalidEditError(f"part {descriptor.part!r} is not present")
        return
    if descriptor.direction not in ("increase", "decrease"):
        raise InvalidEditError(f"unknown direction {descriptor.direction!r}")
    key = (descriptor.part, descriptor.attribute)
    if key not in NOMINALS[params.category] or descriptor.part not in params.parts:
        raise InvalidEditError(f"no attribute {key} on this shape")
    if (descriptor.factor > 1.0) != (descriptor.direction == "increase"):
        raise InvalidEditError(
            f"factor {descriptor.factor} contradicts direction {descriptor.direction}"
        )
    value = params.value(*key) * descriptor.factor
    nominal = NOMINALS[params.category][key]
    lo, hi = EDIT_RANGE
    if not (lo * nominal <= value <= hi * nominal):
        raise InvalidEditError(
            f"edited value {value:.4g} falls outside "
            f"[{lo * nominal:.4g}, {hi * nominal:.4g}]"
        )


def apply_edit(params: ShapeParams, descriptor: EditDescriptor) -> ShapeParams:
    """Edited copy of params; remove drops the part and its attributes."""
    _validate_edit(params, descriptor)
    if descriptor.direction == "remove":
        parts = tuple(p for p in params.parts if p != descriptor.part)
        attrs = {k: v for k, v in params.attributes.items() if k[0] != descriptor.part}
        return replace(params, parts=parts, attributes=attrs)
    key = (descriptor.part, descriptor.attribute)
    attrs = dict(params.attributes)
    attrs[key] = attrs[key] * descriptor.factor
    return replace(params, attributes=attrs)


def _snap_to_unmasked(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Move masked points onto their nearest unmasked neighbor."""
    out = points.copy()
    anchors = points[~mask]
    moved = points[mask]
    d2 = ((moved[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    out[mask] = anchors[np.argmin(d2, axis=1)]
    return out


def make_edit_pair(params: ShapeParams, descriptor: EditDescriptor,
                   k: int = DEFAULT_POINTS, seed: int = 0,
                   template: int = 0) -> EditTriplet:
    """Source/target pair differing only inside the edited part's mask.

    The target reuses the source's placements and point allocation for
    every unedited part, so off-mask points are bit-identical and both
    clouds share the source's normalization transform.
    """
    _validate_edit(params, descriptor)
    layout_src = _layout(params)
    counts = part_point_counts(layout_src, k)
    src_points, labels = _points_for_layout(layout_src, counts)
    mask = labels == PART_LABELS[descriptor.part]

    if descriptor.direction == "remove":
        tgt_points = _snap_to_unmasked(src_points, mask)
    else:
        layout_tgt = dict(layout_src)
        layout_tgt[descriptor.part] = _layout(apply_edit(params, descriptor))[
            descriptor.part
        ]
        tgt_points, tgt_labels = _points_for_layout(layout_tgt, counts)
        assert np.array_equal(labels, tgt_labels)

    centroid, scale = normalize_transform(src_points)
    source = PointCloud((src_points - centroid) / scale, labels)
    target = PointCloud((tgt_points - centroid) / scale, labels.copy())
    text = render_prompt(descriptor, template)
    return EditTriplet(
        source=source,
        target=target,
        mask=mask,
        prompt=tokenize(text),
        prompt_text=text,
        descriptor=descriptor,
    )


# ------------------------------------------------------------------ dataset


@dataclass
class DatasetConfig:
    out_dir: str
    n: int = 100
    categories: tuple[str, ...] = ("chair", "table", "lamp")
    points: int = DEFAULT_POINTS
    split: float = 0.9
    seed: int = 0


_MIN_PART_POINTS = 10


def _shape_params_for(category: str, master_seed: int, index: int,
                      points: int) -> tuple[ShapeParams, int]:
    """Resample until every part holds enough points for the estimators."""
    for attempt in range(64):
        child = np.random.SeedSequence([master_seed, index, attempt])
        seed = int(child.generate_state(1)[0])
        params = sample_params(category, seed)
        counts = part_point_counts(_layout(params), points)
        if min(counts.values()) >= _MIN_PART_POINTS:
            return params, seed
    raise InvalidParamsError(f"no viable params for shape {index}")


def _record_params(params: ShapeParams) -> dict:
    return {
        "category": params.category,
        "parts": list(params.parts),
        "attributes": {f"{p}.{a}": v for (p, a), v in params.attributes.items()},
    }


def params_from_record(record: dict) -> ShapeParams:
    attrs = {}
    for key, value in record["attributes"].items():
        part, attribute = key.split(".")
        attrs[(part, attribute)] = float(value)
    return ShapeParams(
        category=record["category"],
        attributes=attrs,
        parts=tuple(record["parts"]),
    )


def build_dataset(config: DatasetConfig) -> Path:
    """Write PCB1 pairs plus a JSONL manifest; returns the manifest path."""
    for category in config.categories:
        _check_category(category)
    out_dir = Path(config.out_dir)
    cloud_dir = out_dir / "clouds"
    cloud_dir.mkdir(parents=True, exist_ok=True)
    n_train = int(round(config.n * config.split))
    records = []
    for i in range(config.n):
        category = config.categories[i % len(config.categories)]
        params, shape_seed = _shape_params_for(category, config.seed, i, config.points)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i, 0xED17]))
        options = edit_options(params)
        while True:
            descriptor = options[int(rng.integers(len(options)))]
            if descriptor.direction == "remove":
                break
            factors = allowed_factors(
                params, descriptor.part, descriptor.attribute, descriptor.direction
            )
            if factors:
                descriptor = replace(
                    descriptor, factor=factors[int(rng.integers(len(factors)))]
                )
                break
        template = int(rng.integers(N_TEMPLATES))
        triplet = make_edit_pair(
            params, descriptor, k=config.points, seed=shape_seed, template=template
        )
        triplet.split = "train" if i < n_train else "test"
        stem = f"{i:06d}"
        save_pcb1(cloud_dir / f"{stem}_src.pcb", triplet.source, mask=triplet.mask)
        save_pcb1(cloud_dir / f"{stem}_tgt.pcb", triplet.target)
        records.append(
            {
                "id": stem,
                "category": category,
                "split": triplet.split,
                "source": f"clouds/{stem}_src.pcb",
                "target": f"clouds/{stem}_tgt.pcb",
                "prompt": triplet.prompt_text,
                "template": template,
                "descriptor": {
                    "part": descriptor.part,
                    "attribute": descriptor.attribute,
                    "direction": descriptor.direction,
                    "factor": descriptor.factor,
                },
                "params": _record_params(params),
                "points": config.points,
                "shape_seed": shape_seed,
            }
        )
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_triplet(record: dict, root: str | Path) -> EditTriplet:
    root = Path(root)
    source, mask = load_pcb1(root / record["source"])
    target, _ = load_pcb1(root / record["target"])
    d = record["descriptor"]
    descriptor = EditDescriptor(
        category=record["category"],
        part=d["part"],
        attribute=d["attribute"],
        direction=d["direction"],
        factor=float(d["factor"]),
    )
    return EditTriplet(
        source=source,
        target=target,
        mask=mask,
        prompt=tokenize(record["prompt"]),
        prompt_text=record["prompt"],
        descriptor=descriptor,
        split=record["split"],
    )
