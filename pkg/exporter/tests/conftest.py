import json

import numpy as np
import pytest
from PIL import Image, ImageDraw

GRAY = (128, 128, 128)

PALETTE = {
    "red": (210, 40, 40),
    "green": (40, 180, 70),
    "blue": (40, 80, 210),
    "yellow": (220, 210, 60),
    "orange": (230, 140, 40),
}

POSITIONS = {"left": 40, "middle": 140, "right": 240}


def draw_scene(category: str, color: str, position: str) -> tuple[Image.Image, tuple]:
    """A gray scene with one colored shape; returns the image and its 2D box."""
    img = Image.new("RGB", (360, 200), GRAY)
    draw = ImageDraw.Draw(img)
    x = POSITIONS[position]
    y = 80
    rgb = PALETTE[color]
    if category == "box":
        box = (x, y, x + 56, y + 56)
        draw.rectangle(box, fill=rgb)
    elif category == "disc":
        box = (x, y, x + 56, y + 56)
        draw.ellipse(box, fill=rgb)
    elif category == "bar":
        box = (x, y + 18, x + 88, y + 38)
        draw.rectangle(box, fill=rgb)
    else:
        raise ValueError(category)
    return img, box


CURATED = [
    ("box", "red", "left", "the red box near the left edge, about 10 meters away"),
    ("box", "blue", "right", "a blue box on the right side some 20 meters out"),
    ("box", "green", "middle", "the green box in the middle of the scene"),
    ("box", "yellow", "left", "that yellow box close to the left border"),
    ("disc", "red", "right", "a red disc far to the right, roughly 15 meters"),
    ("disc", "blue", "middle", "the blue disc sitting in the center"),
    ("disc", "orange", "left", "an orange disc near the left, 8 meters off"),
    ("disc", "green", "right", "the green disc by the right edge"),
    ("bar", "red", "middle", "a red bar lying across the middle"),
    ("bar", "blue", "left", "the blue bar near the left, around 12 meters"),
    ("bar", "yellow", "right", "a yellow bar at the right side of the view"),
    ("bar", "orange", "middle", "that orange bar in the central area"),
]


@pytest.fixture(scope="session")
def curated_dataset(tmp_path_factory):
    """Images plus annotations for the curated caption/crop pairs."""
    root = tmp_path_factory.mktemp("curated")
    images = root / "images"
    images.mkdir()
    lines = []
    for i, (category, color, position, caption) in enumerate(CURATED):
        img, box = draw_scene(category, color, position)
        image_id = f"scene{i:03d}"
        img.save(images / f"{image_id}.png")
        lines.append(json.dumps({
            "sample_id": f"c{i:03d}",
            "image_id": image_id,
            "caption": caption,
            "category": category,
            "box3d": {"x": 0.0, "y": 0.0, "z": 10.0 + i, "l": 3.0, "w": 1.5,
                      "h": 1.4, "yaw": 0.0},
            "box2d": list(box),
            "occlusion": "none",
            "truncation": 0.0,
            "calib_ref": "calib.txt",
        }))
    ann = root / "annotations.jsonl"
    ann.write_text("".join(line + "\n" for line in lines))
    return {"root": root, "images": images, "annotations": ann, "cases": CURATED}
