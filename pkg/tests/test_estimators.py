import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cot4det.estimators import AnswerDecoder, DetectionEvaluator, MockLVLM, PromptSampler


def test_params_and_clone():
    est = MockLVLM(duplication_rate=0.4, random_state=3)
    assert est.get_params()["duplication_rate"] == 0.4
    twin = clone(est).set_params(hallucination_rate=0.2)
    assert twin.get_params()["hallucination_rate"] == 0.2
    assert est.hallucination_rate == 0.0


def test_unfitted_raises(corpus):
    _, anns = corpus
    with pytest.raises(NotFittedError):
        MockLVLM().predict(anns)
    with pytest.raises(NotFittedError):
        PromptSampler().transform(anns)


@pytest.mark.parametrize(
    "est",
    [MockLVLM(duplication_rate=1.5), MockLVLM(jitter=-1), MockLVLM(setting="weird"), PromptSampler(granularity="essay"), PromptSampler(neg_ratio=-1)],
)
def test_bad_params_rejected_at_fit(est, corpus):
    vocab, anns = corpus
    with pytest.raises(ValueError):
        est.fit(anns, vocab=vocab)


def test_pipeline_end_to_end(corpus):
    vocab, anns = corpus
    model = MockLVLM(setting="full").fit(vocab=vocab)
    texts = model.predict(anns)
    decoder = AnswerDecoder(policy="repair").fit()
    batch = [(t, model.prompt_spec(a), a.width, a.height) for t, a in zip(texts, anns)]
    dets = dict(zip((a.image_id for a in anns), decoder.transform(batch)))
    evaluator = DetectionEvaluator().fit(anns, vocab=vocab)
    assert evaluator.score(dets) == 1.0
    assert evaluator.evaluate(dets).precision == 1.0


def test_prompt_sampler_deterministic(corpus):
    vocab, anns = corpus
    a = PromptSampler(random_state=4).fit(anns, vocab=vocab).transform(anns)
    b = PromptSampler(random_state=4).fit_transform(anns, vocab=vocab)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
