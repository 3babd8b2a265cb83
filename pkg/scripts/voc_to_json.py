"""Convert PASCAL VOC XML annotations to the incdet annotation JSON.

    python scripts/voc_to_json.py VOCdevkit/VOC2007 --image-set trainval --out voc07_trainval.json

Boxes are converted from VOC's 1-based inclusive pixel corners to
continuous corners ``[xmin - 1, ymin - 1, xmax, ymax]``. Objects flagged
``difficult`` are kept unless ``--skip-difficult`` is given. Category ids
follow the usual alphabetical VOC order, so ``0-18+19`` is the 19+1 split
(tvmonitor novel) and ``0-9+10-19`` the 10+10 split.
"""

import argparse
import json
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)  # fmt: skip


def convert(root: Path, image_set: str, skip_difficult: bool = False) -> dict:
    ids = (root / "ImageSets" / "Main" / f"{image_set}.txt").read_text().split()
    cat_id = {name: i for i, name in enumerate(VOC_CLASSES)}
    images, annotations = [], []
    for n, stem in enumerate(ids):
        tree = ET.parse(root / "Annotations" / f"{stem}.xml").getroot()
        size = tree.find("size")
        w, h = int(size.findtext("width")), int(size.findtext("height"))
        images.append({"id": n, "width": w, "height": h, "file_name": str(root / "JPEGImages" / f"{stem}.jpg")})
        for obj in tree.iter("object"):
            if skip_difficult and obj.findtext("difficult", "0").strip() == "1":
                continue
            bb = obj.find("bndbox")
            x1, y1, x2, y2 = (float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
            box = [max(x1 - 1, 0.0), max(y1 - 1, 0.0), min(x2, w), min(y2, h)]
            annotations.append(
                {"id": len(annotations), "image_id": n, "category_id": cat_id[obj.findtext("name").strip()], "bbox": box}
            )
    return {
        "info": {"source": str(root), "image_set": image_set, "skip_difficult": skip_difficult},
        "categories": [{"id": i, "name": name} for i, name in enumerate(VOC_CLASSES)],
        "images": images,
        "annotations": annotations,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="VOC XML to incdet JSON")
    ap.add_argument("voc_root", type=Path, help="e.g. VOCdevkit/VOC2007")
    ap.add_argument("--image-set", default="trainval")
    ap.add_argument("--skip-difficult", action="store_true")
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args(argv)
    doc = convert(args.voc_root, args.image_set, args.skip_difficult)
    args.out.write_text(json.dumps(doc), encoding="utf-8")
    print(f"{len(doc['images'])} images, {len(doc['annotations'])} objects -> {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
