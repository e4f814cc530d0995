import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

from cot4det.datasets import Category, CategoryVocab, ImageAnnotation, Instance
from cot4det.geometry import BBox

FIXTURES = Path(__file__).parent / "fixtures"

# The answer-format listing with its x1/y1/x2/y2 placeholders filled by
# concrete, left-to-right ordered coordinates.
PAPER_LISTING = """Category Classification:
class_1, class_2

Category Counting:
class_1: 3; class_2: 1

Grounding Boxes:
[
  {"bbox_2d": [12, 40, 96, 210], "label": "class_1"},
  {"bbox_2d": [130, 35, 220, 200], "label": "class_1"},
  {"bbox_2d": [260, 50, 340, 230], "label": "class_1"},
  {"bbox_2d": [400, 120, 560, 300], "label": "class_2"}
]"""

PAPER_LISTING_VERBATIM = """Category Classification:
class_1, class_2

Category Counting:
class_1: 3; class_2: 1

Grounding Boxes:
[
  {"bbox_2d": [x1, y1, x2, y2], "label": "class_1"},
  {"bbox_2d": [x1, y1, x2, y2], "label": "class_1"},
  {"bbox_2d": [x1, y1, x2, y2], "label": "class_1"},
  {"bbox_2d": [x1, y1, x2, y2], "label": "class_2"}
]"""


def random_box(rng, width, height, min_size=2.0, decimals=2):
    w = float(rng.uniform(min_size, width / 3))
    h = float(rng.uniform(min_size, height / 3))
    x1 = round(float(rng.uniform(0, width - w)), decimals)
    y1 = round(float(rng.uniform(0, height - h)), decimals)
    x2 = min(round(x1 + w, decimals), width)
    y2 = min(round(y1 + h, decimals), height)
    return BBox(x1, y1, x2, y2)


def make_corpus(n_images=20, n_categories=10, seed=0, max_objects=8, width=640, height=480):
    """Synthetic vocabulary and annotations with a mix of small and large objects."""
    rng = np.random.default_rng(seed)
    vocab = CategoryVocab.from_names([f"category {i}" for i in range(n_categories)])
    anns = []
    for image_id in range(1, n_images + 1):
        inst = []
        for _ in range(int(rng.integers(0, max_objects + 1))):
            cid = int(rng.integers(1, n_categories + 1))
            inst.append(Instance(cid, random_box(rng, width, height)))
        anns.append(ImageAnnotation(image_id, width, height, tuple(inst), file_name=f"{image_id:06d}.jpg"))
    return vocab, anns


def coco_document(vocab, anns):
    images, annotations = [], []
    for ann in anns:
        images.append({"id": ann.image_id, "width": ann.width, "height": ann.height, "file_name": ann.file_name or f"{ann.image_id}.jpg"})
        for inst in ann.instances:
            b = inst.box
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": ann.image_id,
                    "category_id": inst.category_id,
                    "bbox": [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1],
                }
            )
    return {"images": images, "annotations": annotations, "categories": [{"id": c.id, "name": c.name} for c in vocab]}


@pytest.fixture
def corpus():
    return make_corpus()


@pytest.fixture
def coco_file(tmp_path, corpus):
    path = tmp_path / "coco.json"
    path.write_text(json.dumps(coco_document(*corpus)))
    return path


@pytest.fixture
def paper_vocab():
    return CategoryVocab((Category(1, "class_1"), Category(2, "class_2")))


class StubChat:
    """Scripted chat-completions server.

    ``script`` is a list of (status, body) consumed first; afterwards each
    request is answered from ``answers`` keyed by the image URL's file name.
    """

    def __init__(self):
        self.script = []
        self.answers = {}
        self.requests = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append({"body": body, "auth": self.headers.get("Authorization")})
                    scripted = stub.script.pop(0) if stub.script else None
                if scripted is None:
                    url = body["messages"][0]["content"][0]["image_url"]["url"]
                    text = stub.answers.get(url.rsplit("/", 1)[-1], "I cannot find any of those objects.")
                    status, payload = 200, {"choices": [{"message": {"role": "assistant", "content": text}}]}
                else:
                    status, payload = scripted
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                if status == 429:
                    self.send_header("Retry-After", "0")
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_chat():
    stub = StubChat()
    yield stub
    stub.close()


def stub3_paths():
    root = FIXTURES / "stub3"
    return root / "annotations.json", root / "answers.json", root / "expected.json"
