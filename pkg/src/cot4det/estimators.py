"""scikit-learn style wrappers so the pipeline stages compose with the wider ecosystem.

Each wrapper keeps its hyper-parameters in ``__init__`` (so ``get_params``,
``set_params`` and ``clone`` work), learns nothing but the data context in
``fit``, and delegates to the functional API.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    check_granularity,
    check_non_negative,
    check_policy,
    check_positive_int,
    check_rate,
    check_setting,
)
from .harness.mock import FaultProfile, mock_generate
from .metrics import evaluate_detections
from .parser import DEFAULT_DUP_IOU, decode
from .prompts import DEFAULT_MAX_CATEGORIES, DEFAULT_NEG_RATIO, build_record, full_category_spec, ground_truth_spec, sample_categories

__all__ = ["PromptSampler", "AnswerDecoder", "DetectionEvaluator", "MockLVLM"]


class PromptSampler(TransformerMixin, BaseEstimator):
    """Turn image annotations into prompt/answer training records.

    Parameters
    ----------
    neg_ratio : float
        Negatives sampled per positive category.
    max_categories : int
        Upper bound on the prompt category list.
    granularity : {"word", "phrase", "sentence"}
    random_state : int
        Combined with each image id to seed that image's draw.
    """

    def __init__(self, neg_ratio=DEFAULT_NEG_RATIO, max_categories=DEFAULT_MAX_CATEGORIES, granularity="word", random_state=0):
        self.neg_ratio = neg_ratio
        self.max_categories = max_categories
        self.granularity = granularity
        self.random_state = random_state

    def fit(self, X, y=None, vocab=None):
        check_non_negative(self.neg_ratio, "neg_ratio")
        check_positive_int(self.max_categories, "max_categories")
        check_granularity(self.granularity)
        if vocab is None:
            raise ValueError("PromptSampler.fit needs the category vocabulary")
        self.vocab_ = vocab
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        records = []
        for ann in X:
            spec = sample_categories(
                ann,
                self.vocab_,
                self.neg_ratio,
                self.max_categories,
                seed=[self.random_state, ann.image_id],
                granularity=self.granularity,
            )
            records.append(build_record(ann, spec, self.vocab_, seed=self.random_state))
        return records


class AnswerDecoder(TransformerMixin, BaseEstimator):
    """Raw model text -> scored detections.

    ``X`` is an iterable of ``(raw_text, prompt_spec, width, height)``.
    """

    def __init__(self, policy="repair", dup_iou=DEFAULT_DUP_IOU):
        self.policy = policy
        self.dup_iou = dup_iou

    def fit(self, X=None, y=None):
        check_policy(self.policy)
        check_rate(self.dup_iou, "dup_iou")
        self.n_features_in_ = 4
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return [decode(text, spec, w, h, self.policy, self.dup_iou)[2] for text, spec, w, h in X]


class DetectionEvaluator(BaseEstimator):
    """Holds ground truth; ``evaluate`` returns the full report, ``score`` its mAP."""

    def __init__(self, iou_threshold=0.5, setting="full"):
        self.iou_threshold = iou_threshold
        self.setting = setting

    def fit(self, X, y=None, vocab=None):
        check_rate(self.iou_threshold, "iou_threshold")
        if vocab is None:
            raise ValueError("DetectionEvaluator.fit needs the category vocabulary")
        self.annotations_ = list(X)
        self.vocab_ = vocab
        return self

    def evaluate(self, detections):
        check_is_fitted(self, "annotations_")
        return evaluate_detections(
            detections, self.annotations_, self.vocab_, check_setting(self.setting), self.iou_threshold
        )

    def score(self, detections, y=None):
        report = self.evaluate(detections)
        return 0.0 if report.map is None else report.map


class MockLVLM(BaseEstimator):
    """Deterministic stand-in for a vision-language model; ``predict`` returns raw answer texts."""

    def __init__(
        self,
        duplication_rate=0.0,
        max_duplicates=1,
        hallucination_rate=0.0,
        small_miss_rate=0.0,
        jitter=0.0,
        cot=True,
        corrupt_counts=False,
        setting="full",
        random_state=0,
    ):
        self.duplication_rate = duplication_rate
        self.max_duplicates = max_duplicates
        self.hallucination_rate = hallucination_rate
        self.small_miss_rate = small_miss_rate
        self.jitter = jitter
        self.cot = cot
        self.corrupt_counts = corrupt_counts
        self.setting = setting
        self.random_state = random_state

    def fit(self, X=None, y=None, vocab=None):
        if vocab is None:
            raise ValueError("MockLVLM.fit needs the category vocabulary")
        self.profile_ = FaultProfile(
            duplication_rate=check_rate(self.duplication_rate, "duplication_rate"),
            max_duplicates=check_positive_int(self.max_duplicates, "max_duplicates"),
            hallucination_rate=check_rate(self.hallucination_rate, "hallucination_rate"),
            small_miss_rate=check_rate(self.small_miss_rate, "small_miss_rate"),
            jitter=check_non_negative(self.jitter, "jitter"),
            seed=self.random_state,
            corrupt_counts=bool(self.corrupt_counts),
        )
        self.setting_ = check_setting(self.setting)
        self.vocab_ = vocab
        return self

    def prompt_spec(self, ann):
        check_is_fitted(self, "profile_")
        if self.setting_ == "ground_truth_categories":
            return ground_truth_spec(ann, self.vocab_)
        return full_category_spec(ann, self.vocab_)

    def predict(self, X):
        check_is_fitted(self, "profile_")
        return [mock_generate(ann, self.prompt_spec(ann), self.vocab_, self.profile_, self.cot) for ann in X]
