import pytest

from xcap.grammar import (
    EOT_ID,
    MAX_SENTENCE_TOKENS,
    NO_FRACTURE,
    PAD_ID,
    SOT_ID,
    UNK_ID,
    UNPARSEABLE,
    FractureLabels,
    Vocabulary,
    all_cases,
    build_vocab,
    parse,
    render,
    render_text,
    tokenize,
)


def test_render_examples():
    case = FractureLabels("severely_displaced", True, False, True, "subcapital")
    assert render_text(case) == ("there is a severely displaced comminuted fracture of the "
                                 "subcapital neck of femur with an avulsed fragment")
    assert render_text(NO_FRACTURE) == "no fracture was identified on this study"
    case = FractureLabels("undisplaced", False, True, False, "transcervical")
    assert render_text(case) == "there is an undisplaced impacted fracture of the transcervical neck of femur"


def test_case_space_size():
    cases = all_cases()
    assert len(cases) == 97
    assert sum(c is NO_FRACTURE for c in cases) == 1


def test_round_trip_and_injective():
    cases = all_cases()
    sentences = [tuple(render(c)) for c in cases]
    assert len(set(sentences)) == len(cases)
    for c in cases:
        assert parse(render(c)) == c


def test_longest_sentence():
    assert max(len(render(c)) for c in all_cases()) == MAX_SENTENCE_TOKENS


@pytest.mark.parametrize("text", [
    "there is a fracture femur",
    "",
    "there is an severely displaced fracture of the subcapital neck of femur",
    "there is a mildly fracture of the subcapital neck of femur",
    "there is a mildly displaced fracture of the pelvis neck of femur",
    "there is a mildly displaced fracture of the subcapital neck of femur with an avulsed",
    "no fracture was identified",
    "there is a mildly displaced impacted comminuted fracture of the subcapital neck of femur",
])
def test_outside_language_is_unparseable(text):
    assert parse(text) is UNPARSEABLE


def test_parse_negative_and_punctuation():
    assert parse("No fracture was identified on this study.") is NO_FRACTURE
    assert parse("There is a moderately displaced, comminuted fracture of the basicervical neck of femur.") == \
        FractureLabels("moderately_displaced", True, False, False, "basicervical")
    assert tokenize("A, b.  C") == ["a", "b", "c"]


def test_vocabulary():
    vocab = build_vocab()
    assert len(vocab) == 32
    assert [vocab.index[t] for t in ("<sot>", "<eot>", "<unk>", "<pad>")] == [SOT_ID, EOT_ID, UNK_ID, PAD_ID]
    assert vocab.tokens[4:] == sorted(vocab.tokens[4:])
    assert all(t == t.lower() for t in vocab.tokens)
    assert build_vocab() == vocab
    for c in all_cases():
        ids = vocab.encode(render(c))
        assert UNK_ID not in ids
        assert ids[0] == SOT_ID and ids[-1] == EOT_ID
        assert vocab.decode(ids) == render(c)
    assert vocab.encode(["zebra"], specials=False) == [UNK_ID]


def test_vocabulary_file_round_trip(tmp_path):
    vocab = build_vocab()
    vocab.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines == vocab.tokens
    assert Vocabulary.load(tmp_path / "vocab.txt") == vocab


def test_labels_validated():
    with pytest.raises(ValueError):
        FractureLabels("very_displaced", False, False, False, "subcapital")
    with pytest.raises(ValueError):
        FractureLabels("undisplaced", False, False, False, "shaft")
