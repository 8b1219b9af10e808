"""Prior-bundle directories and checkpoint blobs.

Bundle layout (little-endian):

    cameras.json                     [{t, K (9 row-major), E (16 row-major), width, height}, ...]
    frame_00000.image.png            8-bit RGB
    frame_00000.mask.pgm             8-bit, 255 = human
    frame_00000.depth_com.f32        raw float32, row-major, with frame_00000.depth_com.json {width, height}
    frame_00000.depth_hum.f32        same, sentinel outside the mask
    keypoints.json                   [{kp_id, part_id, uv, obs: [{frame, t, pixel, visible}]}]
    sparse_points.json               per-frame lists of 3-vectors

A checkpoint is ``MAGIC``, a little-endian uint32 header length, a JSON header
with array names, shapes and all integer/metadata fields, then the arrays as
packed little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .deform_net import DeformNetParams, EncodingConfig
from .scene import (INVALID_DEPTH, Camera, DataError, FramePriors, Gaussians, GaussianFrameSet, KeypointTrack,
                    Observation, PriorBundle)

MAGIC = b"RFSPLAT1"
_FIELDS = ("mu", "rot", "scale", "opacity", "color")


def _frame_path(root: Path, i: int, suffix: str) -> Path:
    return root / f"frame_{i:05d}.{suffix}"


def _read_json(path: Path):
    if not path.exists():
        raise DataError(f"{path}: missing file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON ({e})") from e


def write_png(path: Path, rgb: NDArray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path: Path) -> NDArray:
    if not path.exists():
        raise DataError(f"{path}: missing file")
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_raster(path: Path, data: NDArray) -> None:
    data = np.asarray(data)
    path.write_bytes(data.astype("<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps({"width": int(data.shape[1]), "height": int(data.shape[0])}))


def read_raster(path: Path, field: str) -> NDArray:
    meta = _read_json(path.with_suffix(".json"))
    if not path.exists():
        raise DataError(f"{path}: missing file")
    try:
        w, h = int(meta["width"]), int(meta["height"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path.with_suffix('.json')}: malformed header, field 'width'/'height'") from e
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != w * h:
        raise DataError(f"{path}: field '{field}' holds {raw.size} values, header says {w}x{h}")
    return raw.reshape(h, w).astype(np.float64)


def save_bundle(bundle: PriorBundle, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cams = [{"t": float(fr.t), "K": cam.K.ravel().tolist(), "E": cam.E.ravel().tolist(), "width": cam.width,
             "height": cam.height} for cam, fr in zip(bundle.cameras, bundle.frames)]
    (root / "cameras.json").write_text(json.dumps(cams))
    for i, fr in enumerate(bundle.frames):
        write_png(_frame_path(root, i, "image.png"), fr.image)
        Image.fromarray(np.where(fr.mask, 255, 0).astype(np.uint8), mode="L").save(_frame_path(root, i, "mask.pgm"))
        write_raster(_frame_path(root, i, "depth_com.f32"), fr.depth_com)
        write_raster(_frame_path(root, i, "depth_hum.f32"), fr.depth_hum)
    tracks = [{"kp_id": tr.kp_id, "part_id": tr.part_id, "uv": np.asarray(tr.uv).tolist(),
               "obs": [{"frame": ob.frame, "t": float(bundle.frames[ob.frame].t),
                        "pixel": np.asarray(ob.pixel).tolist(), "visible": bool(ob.visible)} for ob in tr.obs]}
              for tr in bundle.tracks]
    (root / "keypoints.json").write_text(json.dumps(tracks))
    (root / "sparse_points.json").write_text(
        json.dumps([np.asarray(fr.sparse_points).reshape(-1, 3).tolist() for fr in bundle.frames]))
    return root


def load_bundle(path) -> PriorBundle:
    """Read and validate a bundle directory; errors name the offending file and field."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: bundle directory not found")
    cams_json = _read_json(root / "cameras.json")
    sparse = _read_json(root / "sparse_points.json")
    if len(sparse) != len(cams_json):
        raise DataError(f"{root / 'sparse_points.json'}: {len(sparse)} frames, cameras.json has {len(cams_json)}")
    cameras, frames = [], []
    for i, c in enumerate(cams_json):
        try:
            cam = Camera(np.array(c["K"], dtype=float).reshape(3, 3), np.array(c["E"], dtype=float).reshape(4, 4),
                         int(c["width"]), int(c["height"]))
            t = float(c["t"])
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"{root / 'cameras.json'}: camera {i} malformed ({e})") from e
        image = read_png(_frame_path(root, i, "image.png"))
        mpath = _frame_path(root, i, "mask.pgm")
        if not mpath.exists():
            raise DataError(f"{mpath}: missing file")
        mask = np.asarray(Image.open(mpath)) > 127
        dcom = read_raster(_frame_path(root, i, "depth_com.f32"), "depth_com")
        dhum = read_raster(_frame_path(root, i, "depth_hum.f32"), "depth_hum")
        fr = FramePriors(t, image, mask, dcom, dhum, np.array(sparse[i], dtype=float).reshape(-1, 3))
        fr.validate(cam, where=str(_frame_path(root, i, "*")))
        cameras.append(cam)
        frames.append(fr)
    tracks = []
    for rec in _read_json(root / "keypoints.json"):
        try:
            obs = [Observation(int(o["frame"]), np.array(o["pixel"], dtype=float), bool(o["visible"]))
                   for o in rec["obs"]]
            tracks.append(KeypointTrack(int(rec["kp_id"]), int(rec["part_id"]), np.array(rec["uv"], dtype=float), obs))
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"{root / 'keypoints.json'}: malformed track record ({e})") from e
    bundle = PriorBundle(cameras, frames, tracks)
    bundle.validate()
    return bundle


# ---------------------------------------------------------------- checkpoints


def _gaussian_arrays(prefix: str, g: Gaussians) -> dict[str, NDArray]:
    return {f"{prefix}.{f}": getattr(g, f) for f in _FIELDS}


def save_checkpoint(path, frame_set: GaussianFrameSet, params: DeformNetParams, meta: dict | None = None) -> None:
    arrays: dict[str, NDArray] = {"ref_times": frame_set.ref_times}
    for i, g in enumerate(frame_set.frames):
        arrays.update(_gaussian_arrays(f"frame{i}", g))
    arrays.update(_gaussian_arrays("background", frame_set.background))
    for name, arr in params.named_arrays():
        arrays["net." + name] = arr
    header = {
        "B": frame_set.B,
        "ref_indices": frame_set.ref_indices.tolist(),
        "lineage": [g.lineage.tolist() for g in frame_set.frames],
        "background_lineage": frame_set.background.lineage.tolist(),
        "visibility": frame_set.visibility.astype(int).ravel().tolist(),
        "visibility_shape": list(frame_set.visibility.shape),
        "src": sorted([int(k), int(v)] for k, v in frame_set.lineage.items()),
        "next_id": int(frame_set.next_id),
        "net": {"B": params.B, "L_pos": params.encoding.L_pos, "L_time": params.encoding.L_time,
                "depth": params.depth, "width": params.width, "skips": list(params.skips),
                "version": params.version},
        "arrays": [[k, list(np.shape(v))] for k, v in arrays.items()],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(hbytes)) + hbytes + blob)


def load_checkpoint(path) -> tuple[GaussianFrameSet, DeformNetParams, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: missing file")
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC or len(data) < len(MAGIC) + 4:
        raise DataError(f"{path}: malformed header, field 'magic'")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: malformed header, field 'json' ({e})") from e
    off = start + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(data):
            raise DataError(f"{path}: truncated data, field '{name}'")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n

    def gauss(prefix: str, lineage) -> Gaussians:
        return Gaussians(*(arrays[f"{prefix}.{f}"] for f in _FIELDS), np.array(lineage, dtype=np.int64))

    frames = [gauss(f"frame{i}", header["lineage"][i]) for i in range(header["B"])]
    bg = gauss("background", header["background_lineage"])
    vis = np.array(header["visibility"], dtype=bool).reshape(header["visibility_shape"])
    fs = GaussianFrameSet(arrays["ref_times"], header["ref_indices"], frames, bg, vis,
                          {int(k): int(v) for k, v in header["src"]}, int(header["next_id"]))
    nh = header["net"]
    params = DeformNetParams(nh["B"], EncodingConfig(nh["L_pos"], nh["L_time"]), nh["depth"], nh["width"],
                             tuple(nh["skips"]), [None] * nh["depth"], {}, nh["version"])
    for i in range(nh["depth"]):
        params.hidden[i] = (arrays[f"net.hidden.{i}.W"], arrays[f"net.hidden.{i}.b"])
    for name in ("w_logits", "dx", "dr", "ds"):
        params.heads[name] = (arrays[f"net.{name}.W"], arrays[f"net.{name}.b"])
    params.check_shapes()
    return fs, params, header["meta"]


def save_depth(path: Path, depth: NDArray) -> None:
    write_raster(Path(path), np.where(np.isfinite(depth), depth, INVALID_DEPTH))
