"""Image-directory embedding exporter (CICD-EMB v1).

Output format::

    CICD-EMB v1 <dim> <count>
    <id> <v1> ... <vdim>

One unit-normalized vector per readable image; the id is the filename
stem. Unreadable files are skipped with a warning and recorded in a
sidecar log next to the output file. Duplicate stems are an error, since
the id is the retrieval key.

Encoders:

* ``stats`` (default): deterministic pixel statistics via Pillow, an
  8x8 RGB thumbnail plus global moments. No weights, runs anywhere;
  similar-looking images land near each other, which is all the
  contrast-retrieval path needs at reference quality.
* ``clip:<model-id>``: image features from a pretrained CLIP checkpoint
  through transformers (requires the optional ``real`` extra and
  downloaded weights).
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tiff"}


class DuplicateIdError(ValueError):
    pass


def stats_encoder(image: Image.Image) -> np.ndarray:
    rgb = image.convert("RGB")
    thumb = np.asarray(rgb.resize((8, 8), Image.BILINEAR), dtype=np.float64) / 255.0
    full = np.asarray(rgb, dtype=np.float64) / 255.0
    moments = np.concatenate([
        full.mean(axis=(0, 1)),
        full.std(axis=(0, 1)),
    ])
    return np.concatenate([thumb.reshape(-1), moments])


class ClipEncoder:
    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise RuntimeError(
                "clip encoder needs the optional 'real' extra "
                "(pip install cicd-adapter[real])") from exc
        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_id)
        self.model.eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)

    def __call__(self, image: Image.Image) -> np.ndarray:
        inputs = self.processor(images=image.convert("RGB"), return_tensors="pt")
        with self._torch.no_grad():
            features = self.model.get_image_features(**inputs)
        return features[0].cpu().numpy().astype(np.float64)


def resolve_encoder(spec: str):
    if spec == "stats":
        return stats_encoder
    if spec.startswith("clip:"):
        return ClipEncoder(spec.split(":", 1)[1])
    raise ValueError(f"unknown encoder {spec!r} (use stats or clip:<model-id>)")


def export_embeddings(image_dir, out_file, encoder="stats", log=sys.stderr) -> dict:
    """Encode every readable image under ``image_dir`` into ``out_file``.

    Returns a summary dict with written/skipped counts. Raises
    DuplicateIdError when two files share a stem and FileNotFoundError
    for an empty/missing directory.
    """
    encode = resolve_encoder(encoder) if isinstance(encoder, str) else encoder
    image_dir = Path(image_dir)
    paths = sorted(p for p in image_dir.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise FileNotFoundError(f"no image files under {image_dir}")

    stems = [p.stem for p in paths]
    for stem in stems:
        if stems.count(stem) > 1:
            raise DuplicateIdError(
                f"duplicate image id {stem!r}: ids are filename stems and must be unique")

    rows: list[tuple[str, np.ndarray]] = []
    skipped: list[tuple[str, str]] = []
    for path in paths:
        try:
            with Image.open(path) as img:
                vec = np.asarray(encode(img), dtype=np.float64)
        except Exception as exc:
            print(f"warning: skipping unreadable image {path}: {exc}", file=log)
            skipped.append((str(path), str(exc)))
            continue
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            print(f"warning: skipping zero-feature image {path}", file=log)
            skipped.append((str(path), "zero feature vector"))
            continue
        rows.append((path.stem, vec / norm))

    if not rows:
        raise FileNotFoundError(f"no readable images under {image_dir}")
    dims = {v.size for _id, v in rows}
    if len(dims) != 1:
        raise ValueError(f"encoder produced inconsistent dims {sorted(dims)}")
    dim = dims.pop()

    out_file = Path(out_file)
    with open(out_file, "w", encoding="utf-8") as fh:
        fh.write(f"CICD-EMB v1 {dim} {len(rows)}\n")
        for image_id, vec in rows:
            fh.write(image_id + " " + " ".join(repr(float(x)) for x in vec) + "\n")
    if skipped:
        sidecar = out_file.with_suffix(out_file.suffix + ".skipped.log")
        with open(sidecar, "w", encoding="utf-8") as fh:
            for path, reason in skipped:
                fh.write(f"{path}\t{reason}\n")
    return {"written": len(rows), "skipped": len(skipped), "dim": dim,
            "out_file": str(out_file)}
