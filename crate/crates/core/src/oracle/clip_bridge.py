"""Line-oriented CLIP encoder used by the Rust `clip` backend.

Reads one JSON request per line on stdin and answers with one JSON line:
  {"op": "info"}                         -> {"dim": int, "input_size": int}
  {"op": "text", "prompts": [str, ...]}  -> {"vectors": [[float, ...], ...]}
  {"op": "image", "png": base64 str}     -> {"vectors": [[float, ...]]}
Errors come back as {"error": str}.
"""

import base64
import io
import json
import sys

import torch
from PIL import Image
from transformers import CLIPModel, CLIPProcessor


def main() -> None:
    source = sys.argv[1]
    model = CLIPModel.from_pretrained(source).eval()
    processor = CLIPProcessor.from_pretrained(source)
    size = processor.image_processor.crop_size["height"]
    out = sys.stdout
    for line in sys.stdin:
        try:
            req = json.loads(line)
            with torch.no_grad():
                if req["op"] == "info":
                    reply = {"dim": model.config.projection_dim, "input_size": size}
                elif req["op"] == "text":
                    enc = processor(text=req["prompts"], return_tensors="pt", padding=True)
                    feats = model.get_text_features(**enc)
                    reply = {"vectors": feats.double().tolist()}
                elif req["op"] == "image":
                    img = Image.open(io.BytesIO(base64.b64decode(req["png"]))).convert("RGB")
                    enc = processor(images=img, return_tensors="pt")
                    feats = model.get_image_features(**enc)
                    reply = {"vectors": feats.double().tolist()}
                else:
                    reply = {"error": f"unknown op {req['op']!r}"}
        except Exception as exc:  # reported to the caller, never fatal
            reply = {"error": str(exc)}
        out.write(json.dumps(reply) + "\n")
        out.flush()


if __name__ == "__main__":
    main()
