import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from truckvlm.imaging import RasterImage
from truckvlm.prompting import (
    CLASS_LABELS, ClassLabel, Demonstration, ImagePart, TextPart, build_prompt, load_aliases,
    normalize_label, predict, render_instruction, select_demonstrations,
)


def tiny_image(seed):
    rng = np.random.default_rng(seed)
    px = (rng.random((6, 9)) < 0.5).astype(np.uint8) * 255
    px[0, 0] = 255
    return RasterImage(px)


def pool(per_class=2):
    return [Demonstration(tiny_image(10 * i + j), label, f"{label.name}-{j}")
            for i, label in enumerate(CLASS_LABELS) for j in range(per_class)]


# --- labels -------------------------------------------------------------------------

def test_closed_label_set():
    assert len(CLASS_LABELS) == 12
    assert CLASS_LABELS[0] is ClassLabel.AUTO_TRANSPORTER
    assert CLASS_LABELS[-1] is ClassLabel.PLATFORM_SEMI
    assert ClassLabel.parse(" Tank Tank ") is ClassLabel.TANK_TANK
    with pytest.raises(ValueError):
        ClassLabel.parse("Tanker")


# --- selection ----------------------------------------------------------------------

def test_zero_shot_selection():
    demos = select_demonstrations(pool(), 0)
    assert demos.k == 0 and demos.instruction


def test_twelve_shots_cover_every_class_once():
    demos = select_demonstrations(pool(3), 12, seed=4)
    assert [d.label for d in demos.demonstrations] == list(CLASS_LABELS)


def test_round_robin_second_pass():
    demos = select_demonstrations(pool(2), 15, seed=1)
    labels = [d.label for d in demos.demonstrations]
    assert labels[:12] == list(CLASS_LABELS)
    assert labels[12:] == list(CLASS_LABELS[:3])


def test_selection_deterministic_and_seeded():
    p = pool(4)
    a = select_demonstrations(p, 7, seed=9)
    b = select_demonstrations(p, 7, seed=9)
    assert [d.source_id for d in a.demonstrations] == [d.source_id for d in b.demonstrations]
    picks = {tuple(d.source_id for d in select_demonstrations(p, 12, seed=s).demonstrations) for s in range(10)}
    assert len(picks) > 1


def test_selection_skips_exhausted_classes():
    p = [d for d in pool(2) if d.label in (ClassLabel.BOBTAIL, ClassLabel.CONTAINER)]
    p += [Demonstration(tiny_image(99), ClassLabel.BOBTAIL, "extra")]
    labels = [d.label for d in select_demonstrations(p, 5).demonstrations]
    assert labels == [ClassLabel.BOBTAIL, ClassLabel.CONTAINER] * 2 + [ClassLabel.BOBTAIL]


def test_selection_errors():
    with pytest.raises(ValueError):
        select_demonstrations(pool(1), 13)
    with pytest.raises(ValueError):
        select_demonstrations(pool(1), -1)


@given(st.integers(12, 24), st.integers(0, 1000))
def test_large_k_covers_all_classes(k, seed):
    demos = select_demonstrations(pool(2), k, seed)
    assert {d.label for d in demos.demonstrations} == set(CLASS_LABELS)
    assert demos.k == k


# --- prompt structure ---------------------------------------------------------------

def test_three_shot_prompt_structure():
    demos = select_demonstrations(pool(), 3)
    query = tiny_image(500)
    prompt = build_prompt(demos, query)
    assert len(prompt.images) == 4
    assert prompt.query is query
    label_lines = [p.text for p in prompt.parts if isinstance(p, TextPart) and p.text.startswith("Label: ")]
    assert label_lines == [f"Label: {d.label.value}" for d in demos.demonstrations]
    assert isinstance(prompt.parts[0], TextPart) and prompt.parts[0].text == demos.instruction
    idx = [i for i, p in enumerate(prompt.parts) if isinstance(p, ImagePart)]
    for i in idx[:-1]:
        assert prompt.parts[i + 1].text.startswith("Label: ")
    assert "Answer with exactly one class name" in prompt.parts[-2].text


def test_zero_shot_prompt_lists_every_label():
    prompt = build_prompt(select_demonstrations(pool(), 0), tiny_image(1))
    assert len(prompt.images) == 1
    for label in CLASS_LABELS:
        assert label.value in prompt.parts[0].text


def test_custom_instruction_still_lists_labels():
    demos = select_demonstrations(pool(), 2, instruction="Classify it.")
    text = build_prompt(demos, tiny_image(3)).parts[0].text
    assert text.startswith("Classify it.")
    assert all(label.value in text for label in CLASS_LABELS)


def test_serialization_is_byte_stable():
    demos = select_demonstrations(pool(), 5, seed=2)
    a = build_prompt(demos, tiny_image(7)).serialize()
    b = build_prompt(select_demonstrations(pool(), 5, seed=2), tiny_image(7)).serialize()
    assert a == b


def test_empty_query_rejected():
    with pytest.raises(ValueError):
        build_prompt(select_demonstrations(pool(), 1), RasterImage(np.zeros((3, 3))))


@given(st.integers(0, 24))
def test_image_count_is_k_plus_one(k):
    prompt = build_prompt(select_demonstrations(pool(2), k), tiny_image(0))
    assert len(prompt.images) == k + 1


def test_render_instruction_placeholders():
    text = render_instruction("Pick one of:\n$labels\n$answer_format", labels=CLASS_LABELS[:2], answer_format="ONE")
    assert text == "Pick one of:\n- Auto Transporter\n- Bobtail\nONE"


# --- predict ------------------------------------------------------------------------

def test_predict_examples():
    assert predict({ClassLabel.BOBTAIL: 0.9, ClassLabel.CONTAINER: 0.1}) is ClassLabel.BOBTAIL
    assert predict({label: 0.5 for label in reversed(CLASS_LABELS)}) is ClassLabel.AUTO_TRANSPORTER
    with pytest.raises(ValueError):
        predict({})


def linear_scan_argmax(scores):
    best = None
    for label in CLASS_LABELS:
        if label in scores and (best is None or scores[label] > scores[best]):
            best = label
    return best


score_maps = st.dictionaries(st.sampled_from(CLASS_LABELS), st.integers(-3, 3).map(float), min_size=1)


@given(score_maps)
def test_predict_matches_linear_scan(scores):
    assert predict(scores) is linear_scan_argmax(scores)


@given(score_maps, st.sampled_from([lambda x: 3 * x + 1, lambda x: x ** 3, lambda x: float(np.exp(x))]))
def test_predict_invariant_under_monotone_maps(scores, f):
    assert predict({k: f(v) for k, v in scores.items()}) is predict(scores)


# --- normalization ------------------------------------------------------------------

@pytest.mark.parametrize("raw, label", [
    (" bobtail.\n", ClassLabel.BOBTAIL),
    ("Enclosed van (semi)", ClassLabel.ENCLOSED_VAN_SEMI),
    ("semi-trailer enclosed van", ClassLabel.ENCLOSED_VAN_SEMI),
    ("Label: Platform (SU)", ClassLabel.PLATFORM_SU),
    ("**Low Boy Platform**", ClassLabel.LOW_BOY_PLATFORM),
    ("a large truck", None),
    ("", None),
])
def test_normalize_examples(raw, label):
    assert normalize_label(raw) is label


@pytest.mark.parametrize("label", CLASS_LABELS)
def test_normalize_round_trip(label):
    assert normalize_label(label.value) is label
    assert normalize_label(label.value.upper()) is label


@given(st.text(max_size=40))
def test_normalize_is_total(raw):
    out = normalize_label(raw)
    assert out is None or out in CLASS_LABELS


def test_alias_file_override(tmp_path):
    path = tmp_path / "aliases.txt"
    path.write_text("# custom\nbig rig → Enclosed Van (Semi)\nhauler -> Auto Transporter\n")
    table = load_aliases(path)
    assert normalize_label("Big  Rig!", table) is ClassLabel.ENCLOSED_VAN_SEMI
    assert normalize_label("dry van", table) is None
    path.write_text("nonsense line\n")
    with pytest.raises(ValueError):
        load_aliases(path)
