import pytest

from instructspeech.errors import InputError
from instructspeech.vocab import TagEntry, TagVocabulary, default_vocabulary, load_vocabulary, make_entry


def test_default_vocabulary_loads():
    vocab = default_vocabulary()
    assert len(vocab.entries) == 18
    for name in ("Laughter", "Breathing", "Sigh", "Whisper"):
        assert name in vocab


def test_lookup_case_insensitive_canonical():
    vocab = default_vocabulary()
    entry = vocab.lookup("bReAtHiNg")
    assert entry is not None
    assert entry.canonical_name == "Breathing"
    assert entry.inline_form == "<|Breathing|>"
    assert entry.annotation_form == "[Breathing]"
    assert vocab.canonical("laughter") == "Laughter"


def test_canonical_unknown_raises():
    with pytest.raises(InputError):
        default_vocabulary().canonical("Juggling")


def test_make_entry_forms():
    e = make_entry("Cough")
    assert e == TagEntry("Cough", "[Cough]", "<|Cough|>")


def test_duplicate_names_rejected():
    with pytest.raises(InputError):
        TagVocabulary((make_entry("Sigh"), make_entry("sigh")))


def test_load_single_field_lines(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("# comment\nLaughter\n\nCough\n", encoding="utf-8")
    vocab = load_vocabulary(p)
    assert vocab.names == ("Laughter", "Cough")


def test_load_rejects_mismatched_forms(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("Laughter|[Laugh]|<|Laughter|>\n", encoding="utf-8")
    with pytest.raises(InputError):
        load_vocabulary(p)


def test_load_rejects_two_field_lines(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("Laughter|[Laughter]\n", encoding="utf-8")
    with pytest.raises(InputError):
        load_vocabulary(p)
