import json
import logging
import math
import random
import threading
import time

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from truckvlm.imaging import RasterImage
from truckvlm.prompting import CLASS_LABELS, ClassLabel, Demonstration, DemonstrationSet, build_prompt
from truckvlm.synth import CLASS_ARCHETYPES
from truckvlm.vlm_client import (
    AspectRule, BackendError, ConfigurationError, MockBackend, RemoteBackend, RetryPolicy, TableRule,
    aspect_anchors_from_dims, classify_all, classify_batch, classify_one, make_batches, mock_score,
    read_records, write_records,
)

SECRET = "sk-test-4f1c9a0d-never-print-me"


def image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    px = np.zeros((h + 4, w + 4), dtype=np.uint8)
    px[2:2 + h, 2:2 + w] = 255
    px[2, 2 + int(rng.integers(0, w))] = 255
    return RasterImage(px)


def prompt_for(img):
    return build_prompt(DemonstrationSet("Classify."), img)


def no_sleep_policy(log=None, **kw):
    return RetryPolicy(sleep=(log.append if log is not None else (lambda s: None)), **kw)


# --- batching -----------------------------------------------------------------------

@pytest.mark.parametrize("n, b, sizes", [(23, 5, [5, 5, 5, 4, 4]), (5, 5, [1] * 5), (1, 5, [1]), (10, 1, [10])])
def test_batch_sizes(n, b, sizes):
    assert [len(x) for x in make_batches(range(n), b)] == sizes


@given(st.integers(1, 200), st.integers(1, 30))
def test_batches_balanced_and_ordered(n, b):
    batches = make_batches(range(n), b)
    sizes = [len(x) for x in batches]
    assert len(batches) == min(n, b)
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)
    assert [q for x in batches for q in x.items] == list(range(n))
    assert [x.index for x in batches] == list(range(len(batches)))


def test_batch_errors():
    with pytest.raises(ValueError):
        make_batches([], 5)
    with pytest.raises(ValueError):
        make_batches([1], 0)


# --- retries ------------------------------------------------------------------------

def test_backoff_schedule():
    p = RetryPolicy()
    assert [p.delay(i) for i in (1, 2, 3)] == [1.0, 2.0, 4.0]
    assert p.max_attempts == 4


def test_table_mock_answers_in_one_attempt():
    img = image(10, 30)
    backend = MockBackend(TableRule({img.fingerprint(): ClassLabel.BOBTAIL}))
    res = classify_one("q0", prompt_for(img), backend, no_sleep_policy())
    assert res.label is ClassLabel.BOBTAIL and res.attempts == 1 and res.raw_text == "Bobtail"


def test_two_failures_then_success():
    img = image(10, 30)
    slept = []
    backend = MockBackend(TableRule({img.fingerprint(): ClassLabel.CONTAINER}), failures={img.fingerprint(): 2})
    res = classify_one("q0", prompt_for(img), backend, no_sleep_policy(slept))
    assert res.attempts == 3 and res.label is ClassLabel.CONTAINER
    assert slept == [1.0, 2.0]


def test_permanent_failure_is_recorded_not_raised():
    img = image(10, 30)
    slept = []
    backend = MockBackend(failures={img.fingerprint(): -1})
    res = classify_one("q0", prompt_for(img), backend, no_sleep_policy(slept))
    assert res.label is None and res.attempts == 4 and "injected failure" in res.error
    assert slept == [1.0, 2.0, 4.0]
    assert backend.calls == 4


def test_non_transient_failure_not_retried():
    class Refuses:
        def generate(self, prompt):
            raise BackendError("bad request", transient=False)

    res = classify_one("q", prompt_for(image(4, 4)), Refuses(), no_sleep_policy())
    assert res.attempts == 1 and res.label is None


def test_unparseable_answer():
    class Chatty:
        def generate(self, prompt):
            return "\n\nProbably some kind of truck\nBobtail"

    res = classify_one("q", prompt_for(image(4, 4)), Chatty(), no_sleep_policy())
    assert res.label is None and res.attempts == 1


def test_results_keep_query_order_under_concurrency():
    class Jittery:
        def __init__(self):
            self.active = 0
            self.peak = 0
            self.lock = threading.Lock()

        def generate(self, prompt):
            with self.lock:
                self.active += 1
                self.peak = max(self.peak, self.active)
            time.sleep(random.Random(prompt.query.fingerprint()).uniform(0, 0.01))
            with self.lock:
                self.active -= 1
            return CLASS_LABELS[int(prompt.query.pixels.shape[1]) % 12].value

    imgs = [image(5, 5 + i, seed=i) for i in range(23)]
    queries = [(f"q{i}", prompt_for(im)) for i, im in enumerate(imgs)]
    backend = Jittery()
    results = classify_all(queries, backend, batch_count=5, policy=no_sleep_policy(), max_in_flight=4)
    assert [r.query_id for r in results] == [q for q, _ in queries]
    assert [r.label for r in results] == [CLASS_LABELS[im.width % 12] for im in imgs]
    assert 1 < backend.peak <= 4
    batch = make_batches(queries, 1)[0]
    assert [r.query_id for r in classify_batch(batch, backend, no_sleep_policy(), 1)] == [q for q, _ in queries]


def test_records_round_trip(tmp_path):
    img = image(3, 9)
    res = classify_one("a", prompt_for(img), MockBackend(), no_sleep_policy())
    write_records([res], tmp_path / "r.jsonl", append=False)
    write_records([res], tmp_path / "r.jsonl")
    recs = read_records(tmp_path / "r.jsonl")
    assert len(recs) == 2
    assert recs[0] == {"id": "a", "label": "Auto Transporter", "raw_text": "Auto Transporter",
                       "latency": recs[0]["latency"], "attempts": 1, "error": ""}


# --- mock scoring -------------------------------------------------------------------

def test_uniform_rule_and_unknown_fingerprint_tie_break():
    img = image(6, 6)
    assert set(mock_score(prompt_for(img), TableRule({})).values()) == {0.0}
    assert MockBackend().generate(prompt_for(img)) == CLASS_LABELS[0].value


def test_mock_is_bit_deterministic():
    img = image(6, 20)
    rule = AspectRule({ClassLabel.BOBTAIL: 3.0, ClassLabel.CONTAINER: 1.0})
    answers = {MockBackend(rule).generate(prompt_for(img)) for _ in range(5)}
    assert len(answers) == 1


def independent_aspect_label(px, anchors):
    rows = [i for i in range(px.shape[0]) if any(px[i])]
    cols = [j for j in range(px.shape[1]) if any(px[:, j])]
    aspect = (cols[-1] - cols[0] + 1) / (rows[-1] - rows[0] + 1)
    best, best_score = None, -math.inf
    for label in CLASS_LABELS:
        if label not in anchors:
            continue
        score = -abs(math.log(aspect) - math.log(anchors[label]))
        if best is None or score > best_score + 1e-12:
            best, best_score = label, score
    return best


@given(st.integers(1, 40), st.integers(1, 120), st.integers(0, 99))
def test_aspect_rule_matches_reimplementation(h, w, seed):
    anchors = aspect_anchors_from_dims(CLASS_ARCHETYPES)
    img = image(h, w, seed)
    got = ClassLabel(MockBackend(AspectRule(anchors)).generate(prompt_for(img)))
    assert got is independent_aspect_label(img.pixels, anchors)


# --- remote adapter -----------------------------------------------------------------

def remote(monkeypatch, handler):
    monkeypatch.setenv("VLM_API_KEY", SECRET)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return RemoteBackend("https://vlm.example/v1beta/", "test-model", client=client)


def test_remote_requires_key(monkeypatch):
    monkeypatch.delenv("VLM_API_KEY", raising=False)
    with pytest.raises(ConfigurationError, match="VLM_API_KEY"):
        RemoteBackend("https://vlm.example", "m")


def test_remote_wire_format(monkeypatch):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["key"] = request.headers.get("x-goog-api-key")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"candidates": [{"content": {"parts": [{"text": "Tank Tank\n"}]}}]})

    backend = remote(monkeypatch, handler)
    demo_img, query = image(4, 10, 1), image(4, 12, 2)
    prompt = build_prompt(DemonstrationSet("Classify.", (Demonstration(demo_img, ClassLabel.BOBTAIL),)), query)
    res = classify_one("q", prompt, backend, no_sleep_policy())
    assert res.label is ClassLabel.TANK_TANK
    assert seen["url"] == "https://vlm.example/v1beta/models/test-model:generateContent"
    assert seen["key"] == SECRET
    parts = seen["body"]["contents"][0]["parts"]
    kinds = ["image" if "inline_data" in p else "text" for p in parts]
    assert kinds.count("image") == 2 and kinds[-1] == "image"
    assert all(p["inline_data"]["mime_type"] == "image/png" for p in parts if "inline_data" in p)
    assert SECRET not in json.dumps(seen["body"])


def test_remote_retries_server_errors(monkeypatch):
    codes = iter([503, 429, 200])

    def handler(request):
        code = next(codes)
        if code != 200:
            return httpx.Response(code)
        return httpx.Response(200, json={"candidates": [{"content": {"parts": [{"text": "Bobtail"}]}}]})

    slept = []
    res = classify_one("q", prompt_for(image(3, 3)), remote(monkeypatch, handler), no_sleep_policy(slept))
    assert res.attempts == 3 and res.label is ClassLabel.BOBTAIL and slept == [1.0, 2.0]


def test_remote_malformed_body(monkeypatch):
    backend = remote(monkeypatch, lambda r: httpx.Response(200, json={"nothing": 1}))
    res = classify_one("q", prompt_for(image(3, 3)), backend, no_sleep_policy())
    assert res.label is None and res.attempts == 1 and "malformed" in res.error


def test_credential_never_leaks(monkeypatch, caplog):
    def echo(request):
        return httpx.Response(401, text=f"invalid key {request.headers['x-goog-api-key']}")

    def explode(request):
        raise httpx.ConnectError(f"refused while sending {SECRET}")

    caplog.set_level(logging.DEBUG)
    outputs = []
    for handler in (echo, explode):
        backend = remote(monkeypatch, handler)
        outputs.append(repr(backend))
        res = classify_one("q", prompt_for(image(3, 3)), backend, no_sleep_policy())
        outputs.append(res.error)
        outputs.append(json.dumps(res.record()))
        assert res.label is None
    outputs.append(caplog.text)
    assert all(SECRET not in text for text in outputs)
    assert "***" in outputs[1]
