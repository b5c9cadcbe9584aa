"""On-disk dataset formats: PNG frames, text event files, JSON manifest."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np
from PIL import Image

from .types import CameraModel, Frame, FrameSequence, EventStream, ValidationError


def atomic_write_bytes(path, data: bytes):
    """Write-to-temp then rename so failures never leave partial files."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_image(path, image: np.ndarray):
    """Quantize [0,1] float image to 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 2:
        img = Image.fromarray(data, mode="L")
    else:
        img = Image.fromarray(data, mode="RGB")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".png")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_image(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_events(path, stream: EventStream):
    lines = [f"# events width={stream.width} height={stream.height} C={stream.contrast}"]
    for t, x, y, p in stream.events:
        lines.append(f"{t} {x} {y} {p}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_events(path) -> EventStream:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# events"):
            raise ValidationError(f"{path}:1: missing event file header")
        fields = dict(kv.split("=") for kv in header.split()[2:])
        try:
            width = int(fields["width"])
            height = int(fields["height"])
            contrast = float(fields["C"])
        except (KeyError, ValueError) as e:
            raise ValidationError(f"{path}:1: bad event header: {e}") from e
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 't x y p', got {line!r}")
            try:
                rows.append([int(v) for v in parts])
            except ValueError as e:
                raise ValidationError(f"{path}:{lineno}: non-integer field: {e}") from e
    events = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if events.size:
        t = events[:, 0]
        if np.any(np.diff(t) < 0):
            bad = int(np.flatnonzero(np.diff(t) < 0)[0]) + 2
            raise ValidationError(f"{path}:{bad + 1}: events not sorted by t")
        x, y = events[:, 1], events[:, 2]
        oob = (x < 0) | (x >= width) | (y < 0) | (y >= height)
        if np.any(oob):
            bad = int(np.flatnonzero(oob)[0])
            raise ValidationError(
                f"{path}:{bad + 2}: event out of bounds "
                f"(t={events[bad, 0]} x={x[bad]} y={y[bad]}) for {width}x{height}"
            )
    return EventStream(events, width, height, contrast)


def _camera_to_json(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "R": [float(v) for v in cam.R.reshape(9)],
        "T": [float(v) for v in cam.T],
    }


def _camera_from_json(d: dict, ctx: str) -> CameraModel:
    try:
        return CameraModel(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
            T=np.array(d["T"], dtype=np.float64),
        )
    except (KeyError, ValueError) as e:
        raise ValidationError(f"{ctx}: bad camera: {e}") from e


def write_dataset(out_dir, frames: FrameSequence, stream: EventStream,
                  frame_subdir: str = "frames"):
    """Write frames as PNGs plus the manifest and event file."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, f in enumerate(frames.frames):
        rel = os.path.join(frame_subdir, f"{i:05d}.png")
        write_image(os.path.join(out_dir, rel), f.image)
        entries.append({
            "path": rel,
            "timestamp_us": int(f.timestamp),
            "camera": _camera_to_json(f.camera),
        })
    write_events(os.path.join(out_dir, "events.txt"), stream)
    manifest = {
        "width": frames.width,
        "height": frames.height,
        "frames": entries,
        "events_path": "events.txt",
    }
    atomic_write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return os.path.join(out_dir, "manifest.json")


def load_dataset(manifest_path) -> tuple[FrameSequence, EventStream]:
    """Load and invariant-check a dataset; events clipped to the frame span."""
    if not os.path.exists(manifest_path):
        raise ValidationError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{manifest_path}: invalid JSON: {e}") from e
    for key in ("width", "height", "frames", "events_path"):
        if key not in manifest:
            raise ValidationError(f"{manifest_path}: missing key {key!r}")
    width, height = int(manifest["width"]), int(manifest["height"])
    if not manifest["frames"]:
        raise ValidationError(f"{manifest_path}: empty sequence")
    base = os.path.dirname(os.path.abspath(manifest_path))
    frames = []
    for i, entry in enumerate(manifest["frames"]):
        ctx = f"{manifest_path}: frames[{i}]"
        path = os.path.join(base, entry["path"])
        if not os.path.exists(path):
            raise ValidationError(f"{ctx}: missing image {entry['path']}")
        image = read_image(path)
        if image.shape[:2] != (height, width):
            raise ValidationError(
                f"{ctx}: image is {image.shape[1]}x{image.shape[0]}, "
                f"manifest says {width}x{height}"
            )
        cam = _camera_from_json(entry["camera"], ctx)
        frames.append(Frame(image, int(entry["timestamp_us"]), cam))
    seq = FrameSequence(frames, width, height)

    events_path = os.path.join(base, manifest["events_path"])
    if not os.path.exists(events_path):
        raise ValidationError(f"{manifest_path}: missing events file {manifest['events_path']}")
    stream = read_events(events_path)
    if (stream.width, stream.height) != (width, height):
        raise ValidationError(
            f"{events_path}: resolution {stream.width}x{stream.height} "
            f"does not match manifest {width}x{height}"
        )
    t0, t1 = seq.span()
    clipped = stream.events[(stream.t >= t0) & (stream.t <= t1)]
    return seq, EventStream(clipped, width, height, stream.contrast)
