"""Annotation HTTP service.

Serves frames from a data directory laid out like a training dataset
(``<id>.png`` images), stores marker sets in ``<id>_markers.json``
sidecars, returns fitted spline previews, and commits rasterized masks
as ``<id>_mask.png`` files that the data loader ingests directly.

Commits to one frame are serialized by a per-frame lock; a commit that
finds the frame busy fails fast with 409 rather than queueing, so the
client can retry with fresh state.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .spline import fit_spline, rasterize

DEFAULT_PORT = 8077
DEFAULT_THICKNESS = 3

__all__ = ["create_app", "main", "DEFAULT_PORT"]


class MarkersIn(BaseModel):
    markers: list[tuple[float, float]]


class CommitIn(BaseModel):
    thickness: int = DEFAULT_THICKNESS


def _frame_ids(data_dir: Path) -> list:
    return sorted(
        p.stem for p in data_dir.glob("*.png") if not p.stem.endswith("_mask")
    )


def create_app(data_dir, ui_dir=None) -> FastAPI:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ValueError(f"data directory not found: {data_dir}")

    app = FastAPI(title="contour annotation service")
    app.state.data_dir = data_dir
    app.state.frame_locks = defaultdict(threading.Lock)
    app.state.registry_lock = threading.Lock()

    def image_path(fid: str) -> Path:
        path = data_dir / f"{fid}.png"
        if fid not in _frame_ids(data_dir) or not path.exists():
            raise HTTPException(status_code=404, detail=f"unknown frame '{fid}'")
        return path

    def sidecar(fid: str) -> Path:
        return data_dir / f"{fid}_markers.json"

    def frame_lock(fid: str) -> threading.Lock:
        with app.state.registry_lock:
            return app.state.frame_locks[fid]

    @app.get("/frames")
    def list_frames():
        frames = [
            {
                "id": fid,
                "annotated": sidecar(fid).exists(),
                "committed": (data_dir / f"{fid}_mask.png").exists(),
            }
            for fid in _frame_ids(data_dir)
        ]
        return {"frames": frames}

    @app.get("/frames/{fid}/image")
    def get_image(fid: str):
        return FileResponse(image_path(fid), media_type="image/png")

    @app.get("/frames/{fid}/markers")
    def get_markers(fid: str):
        image_path(fid)
        path = sidecar(fid)
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no markers stored for '{fid}'")
        return json.loads(path.read_text(encoding="utf-8"))

    @app.post("/frames/{fid}/markers")
    def post_markers(fid: str, body: MarkersIn):
        path = image_path(fid)
        with Image.open(path) as im:
            extent = im.size[0]
        markers = [list(m) for m in body.markers]
        try:
            contour = fit_spline(markers, extent=extent)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        doc = {"frame_id": fid, "markers": markers, "created_at": time.time()}
        sidecar(fid).write_text(json.dumps(doc), encoding="utf-8")
        return {
            "frame_id": fid,
            "polyline": contour.polyline.tolist(),
            "sample_count": contour.sample_count,
            "degree": contour.degree,
        }

    @app.post("/frames/{fid}/commit")
    def commit(fid: str, body: CommitIn):
        path = image_path(fid)
        if body.thickness < 1:
            raise HTTPException(status_code=422, detail="thickness must be >= 1")
        mpath = sidecar(fid)
        if not mpath.exists():
            raise HTTPException(status_code=422, detail=f"no markers stored for '{fid}'")
        lock = frame_lock(fid)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail=f"frame '{fid}' has a commit in progress")
        try:
            doc = json.loads(mpath.read_text(encoding="utf-8"))
            with Image.open(path) as im:
                extent = im.size[0]
            try:
                contour = fit_spline(doc["markers"], extent=extent)
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            result = rasterize(contour, body.thickness, extent)
            mask_name = f"{fid}_mask.png"
            out = (result.mask * np.uint8(255)).astype(np.uint8)
            Image.fromarray(out, mode="L").save(data_dir / mask_name)
        finally:
            lock.release()
        return {"status": "ok", "mask": mask_name, "clipped": result.clipped}

    if ui_dir is not None:
        # mounted last so API routes take precedence over static files
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="contourforge-annotate",
                                     description="serve frames for contour annotation")
    parser.add_argument("--data", required=True, help="frame directory")
    parser.add_argument("--ui", help="static UI bundle directory")
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    import uvicorn

    app = create_app(args.data, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
