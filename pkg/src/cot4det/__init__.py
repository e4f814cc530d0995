"""Chain-of-thought detection toolkit: build classification/counting/grounding
training data, parse and repair model answers, and score them."""

__version__ = "0.1.0"

from .datasets import CategoryVocab, ImageAnnotation, RefExpression, load_coco, load_lvis_bands, load_refexp
from .errors import Cot4DetError, NoParsableContent
from .geometry import BBox, area, iou
from .metrics import EvalReport, average_precision, coco_map, evaluate_detections, precision_recall, rec_accuracy
from .parser import Detection, parse_cot_answer, to_detections, validate
from .prompts import PromptSpec, build_mixture, render_cot_answer, render_prompt, sample_categories

__all__ = [
    "BBox",
    "area",
    "iou",
    "CategoryVocab",
    "ImageAnnotation",
    "RefExpression",
    "load_coco",
    "load_lvis_bands",
    "load_refexp",
    "PromptSpec",
    "sample_categories",
    "render_prompt",
    "render_cot_answer",
    "build_mixture",
    "Detection",
    "parse_cot_answer",
    "validate",
    "to_detections",
    "EvalReport",
    "precision_recall",
    "average_precision",
    "coco_map",
    "evaluate_detections",
    "rec_accuracy",
    "Cot4DetError",
    "NoParsableContent",
]
