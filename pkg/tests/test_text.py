from hypothesis import given, settings
from hypothesis import strategies as st

from stsgr.data.text import EOS_ID, PAD_ID, SOS_ID, UNK_ID, Vocabulary, detokenize, normalize, tokenize

words = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=8)
punct = st.sampled_from(list("?.,!;:'"))
token_lists = st.lists(st.one_of(words, punct), max_size=15)


def test_tokenize_examples():
    assert tokenize("Is she standing?") == ["is", "she", "standing", "?"]
    assert tokenize("") == []
    assert detokenize(["is", "she", "standing", "?"]) == "is she standing?"


@settings(max_examples=1000, deadline=None)
@given(token_lists)
def test_round_trip_on_normalized_text(tokens):
    text = detokenize(tokens)
    assert tokenize(text) == tokens
    assert detokenize(tokenize(text)) == text
    assert normalize(text) == text


def test_min_count_threshold():
    corpus = [["rare"]] * 4 + [["kept"]] * 5
    v = Vocabulary.build(corpus, min_count=5)
    assert "kept" in v and "rare" not in v
    assert v.encode(["rare", "kept"]) == [UNK_ID, v.stoi["kept"]]


def test_reserved_ids_and_ordering():
    v = Vocabulary.build([["b", "a", "c", "c"], ["a", "b", "c"]], min_count=1)
    assert v.itos[:4] == ["<eos>", "<sos>", "<pad>", "<unk>"]
    assert (EOS_ID, SOS_ID, PAD_ID, UNK_ID) == (0, 1, 2, 3)
    assert v.itos[4:] == ["c", "a", "b"]


def test_rebuild_is_identical_and_persists(tmp_path):
    corpus = [tokenize("the red cube is near the blue ball"), tokenize("is there a red cube?")]
    a, b = Vocabulary.build(corpus, 1), Vocabulary.build(corpus, 1)
    assert a.itos == b.itos
    a.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json").stoi == a.stoi


def test_decode_strips_control_tokens():
    v = Vocabulary.build([["yes"]], 1)
    ids = [SOS_ID, v.stoi["yes"], EOS_ID, v.stoi["yes"]]
    assert v.decode(ids) == ["yes"]
    assert v.decode([v.stoi["yes"], PAD_ID]) == ["yes"]
