"""First-layer flow filter fields and top-activation purity analysis."""
from __future__ import annotations

import colorsys
import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import center_offsets, crop
from .eval import sliding_clips
from .network import POOL_PLAN

# Colour of the vector drawn for each of the three filter time steps.
TIME_COLOURS = ("blue", "red", "green")
LAYERS = {"conv3": 3, "conv4": 4, "conv5": 5}


@dataclass
class FilterField:
    index: int
    vectors: np.ndarray  # (3 time, 3 y, 3 x, 2) with (flow-x weight, flow-y weight)

    def to_dict(self):
        return {"index": self.index, "colours": list(TIME_COLOURS), "vectors": self.vectors.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["index"]), np.array(d["vectors"], dtype=np.float64))


def export_filter_fields(net):
    if net.spec.modality != "flow":
        raise ValueError("filter fields are only defined for flow networks")
    w = net.convs[0].weight.astype(np.float64)  # (K, 2, 3, 3, 3)
    return [FilterField(k, np.stack([w[k, 0], w[k, 1]], axis=-1)) for k in range(w.shape[0])]


def fields_to_json(fields, path=None):
    text = json.dumps([f.to_dict() for f in fields], indent=1)
    if path is not None:
        Path(path).write_text(text)
    return text


def fields_from_json(text):
    return [FilterField.from_dict(d) for d in json.loads(text)]


def fields_to_svg(fields, path=None, cell=60, cols=8):
    """Grid of filters; each spatial tap draws its three time vectors head to tail."""
    rows = -(-len(fields) // cols)
    scale = max((np.abs(f.vectors).max() for f in fields), default=0) or 1.0
    step = cell / 4
    arrow = step * 0.45 / scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell}">']
    for f in fields:
        ox, oy = (f.index % cols) * cell, (f.index // cols) * cell
        out.append(f'<rect x="{ox}" y="{oy}" width="{cell}" height="{cell}" fill="white" stroke="#ccc"/>')
        for y in range(3):
            for x in range(3):
                px, py = ox + step * (x + 1), oy + step * (y + 1)
                for t in range(3):
                    dx, dy = f.vectors[t, y, x] * arrow
                    out.append(
                        f'<line x1="{px:.2f}" y1="{py:.2f}" x2="{px + dx:.2f}" y2="{py + dy:.2f}" '
                        f'stroke="{TIME_COLOURS[t]}" stroke-width="1"/>'
                    )
                    px, py = px + dx, py + dy
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(svg)
    return svg


# ---------------------------------------------------------------------------
# Top activations


@dataclass
class ActivationRecord:
    video_id: str
    label: str
    value: float
    clip_start: int
    frame: int  # input coordinates of the response's receptive-field origin
    y: int
    x: int
    index: tuple  # (t, y, x) inside the layer's output

    def to_dict(self):
        d = asdict(self)
        d["index"] = list(self.index)
        return d


def _stage(layer):
    if isinstance(layer, str):
        if layer not in LAYERS:
            raise ValueError(f"layer must be one of {sorted(LAYERS)}")
        return LAYERS[layer]
    if layer not in LAYERS.values():
        raise ValueError("layer must be conv3, conv4 or conv5")
    return int(layer)


def cumulative_stride(stage):
    """(t, h, w) input pixels per output cell of conv ``stage``."""
    st = np.ones(3, dtype=int)
    for kernel in POOL_PLAN[: stage - 1]:
        st *= kernel
    return tuple(int(s) for s in st)


def eligible_videos(videos, one_per_group=True):
    """``videos`` is [(record, volume)]; keep the first video of each group."""
    if not one_per_group:
        return list(videos)
    seen, out = set(), []
    for rec, vol in videos:
        g = rec.group or rec.id
        if g not in seen:
            seen.add(g)
            out.append((rec, vol))
    return out


def center_clips(net, volume, stride=4):
    """Centre-cropped sliding clips: [(clip_start, x0, y0, clip)]."""
    spec = net.spec
    out = []
    for i, clip in enumerate(sliding_clips(volume, spec.frames, stride)):
        x0 = center_offsets(clip.width, spec.width)
        y0 = center_offsets(clip.height, spec.height)
        out.append((i * stride, x0, y0, crop(clip, x0, y0, 0, spec.width, spec.height, clip.frames)))
    return out


def layer_top_activations(net, layer, videos, k=7, one_per_group=True, stride=4, filters=None):
    """{filter: top-k ActivationRecords} for a conv layer (post-ReLU responses)."""
    stage = _stage(layer)
    n_filters = net.spec.conv_channels[stage - 1]
    filters = range(n_filters) if filters is None else list(filters)
    for f in filters:
        if not 0 <= f < n_filters:
            raise ValueError(f"filter {f} out of range for {n_filters} channels")
    st, sh, sw = cumulative_stride(stage)
    per_filter = {f: [] for f in filters}
    for rec, vol in eligible_videos(videos, one_per_group):
        clips = center_clips(net, vol, stride)
        feats = net.features(np.stack([c.data for *_, c in clips]), stage)  # (n, K, T, H, W)
        for f in filters:
            resp = feats[:, f]
            flat = int(np.argmax(resp))
            n, t, y, x = np.unravel_index(flat, resp.shape)
            start, x0, y0, _ = clips[n]
            per_filter[f].append(ActivationRecord(
                rec.id, rec.label, float(resp[n, t, y, x]), start,
                int(start + t * st), int(y0 + y * sh), int(x0 + x * sw), (int(t), int(y), int(x)),
            ))
    for f in filters:
        # stable sort keeps manifest order among equal values
        per_filter[f] = sorted(per_filter[f], key=lambda r: -r.value)[:k]
    return per_filter


def top_activations(net, layer, filter, videos, k=7, one_per_group=True, stride=4):
    return layer_top_activations(net, layer, videos, k, one_per_group, stride, filters=[filter])[filter]


def filter_purity(records):
    """(fraction of records carrying the dominant class, dominant class).

    Ties between classes go to the lexicographically first class name.
    """
    if not records:
        raise ValueError("no activation records")
    counts = Counter(r.label for r in records)
    top = max(counts.values())
    dominant = min(c for c, n in counts.items() if n == top)
    return top / len(records), dominant


def sort_filters_by_purity(per_filter):
    return sorted(per_filter, key=lambda f: (-filter_purity(per_filter[f])[0], f))


def mean_purity(per_filter):
    return float(np.mean([filter_purity(r)[0] for r in per_filter.values()]))


def purity_grid(per_filter, n_filters=30, k=7):
    """Rows = activation rank, columns = purity-sorted filters; cells hold class labels."""
    order = sort_filters_by_purity(per_filter)[:n_filters]
    grid = [[per_filter[f][r].label if r < len(per_filter[f]) else None for f in order] for r in range(k)]
    return {"filters": order, "purity": [filter_purity(per_filter[f])[0] for f in order], "grid": grid}


def class_colours(classes):
    classes = sorted(classes)
    out = {}
    for i, c in enumerate(classes):
        r, g, b = colorsys.hsv_to_rgb(i / max(len(classes), 1), 0.75, 0.9)
        out[c] = f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"
    return out


def purity_grid_export(grids, classes, json_path=None, svg_path=None, cell=12):
    """Write {layer: purity_grid(...)} as JSON and as one SVG panel per layer."""
    colours = class_colours(classes)
    doc = {"classes": sorted(classes), "colours": colours, "layers": grids}
    if json_path is not None:
        Path(json_path).write_text(json.dumps(doc, indent=1))
    width = max((len(g["filters"]) for g in grids.values()), default=0) * cell
    height = sum((len(g["grid"]) + 2) * cell for g in grids.values())
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    oy = 0
    for name, g in grids.items():
        out.append(f'<text x="0" y="{oy + cell - 2}" font-size="{cell - 2}">{name}</text>')
        oy += cell
        for r, row in enumerate(g["grid"]):
            for c, label in enumerate(row):
                fill = colours[label] if label is not None else "#ffffff"
                out.append(f'<rect x="{c * cell}" y="{oy + r * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
        oy += (len(g["grid"]) + 1) * cell
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    if svg_path is not None:
        Path(svg_path).write_text(svg)
    return doc, svg
