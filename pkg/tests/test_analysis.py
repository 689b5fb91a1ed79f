import numpy as np
import pytest

from xattn import analysis as A


def test_single_phone_covers_all_frames():
    align = A.PhoneAlignment([(0, 16000, "aa")])
    assert A.frames_to_phones(align, 98) == ["aa"] * 98


def test_two_equal_phones_split_near_half():
    align = A.PhoneAlignment([(0, 8000, "aa"), (8000, 16000, "s")])
    labels = A.frames_to_phones(align, 98)
    # centre of frame t is 160 t + 200; it lies before 8000 for t <= 48
    assert labels[:49] == ["aa"] * 49 and labels[49:] == ["s"] * 49


def test_centre_on_boundary_goes_to_later_phone():
    align = A.PhoneAlignment([(0, 360, "aa"), (360, 1000, "iy")])
    assert A.frames_to_phones(align, 2)[1] == "iy"  # frame 1 centre = 160 + 200 = 360


def test_uncovered_frames_are_silence():
    align = A.PhoneAlignment([(1000, 2000, "aa")])
    labels = A.frames_to_phones(align, 20)
    assert labels[0] == A.SILENCE and labels[-1] == A.SILENCE and "aa" in labels


def test_alignment_validation():
    with pytest.raises(ValueError):
        A.frames_to_phones(A.PhoneAlignment([]), 3)
    with pytest.raises(ValueError):
        A.PhoneAlignment([(0, 10, "a"), (5, 20, "b")])
    with pytest.raises(ValueError):
        A.PhoneAlignment([(10, 10, "a")])


def test_accumulate_basic_cases():
    t = A.accumulate_attention(np.full(4, 0.25), ["aa"] * 4, A.PhoneAttentionTable())
    assert t.mean("aa") == 0.25
    t = A.accumulate_attention([0.5, 0.5, 0.0], ["aa", "aa", "s"], A.PhoneAttentionTable())
    assert t.total == {"aa": 1.0, "s": 0.0}
    with pytest.raises(ValueError):
        A.accumulate_attention([1.0], ["aa", "b"], A.PhoneAttentionTable())


def test_padding_excluded():
    t = A.accumulate_attention([0.6, 0.4, 0.0], ["aa", "s", "s"], A.PhoneAttentionTable(), mask=[1, 1, 0])
    assert t.count == {"aa": 1, "s": 1}


def random_utts(n, seed):
    rng = np.random.default_rng(seed)
    phones = ["aa", "iy", "s", "t", "h#"]
    out = []
    for _ in range(n):
        T = int(rng.integers(3, 30))
        out.append((rng.dirichlet(np.ones(T)), list(rng.choice(phones, T))))
    return out


def test_additivity_mass_and_order_invariance():
    utts = random_utts(12, 0)
    a = A.PhoneAttentionTable()
    for w, lab in utts:
        A.accumulate_attention(w, lab, a)
    b = A.PhoneAttentionTable()
    for w, lab in reversed(utts):
        A.accumulate_attention(w, lab, b)
    assert abs(sum(a.total.values()) - 12) <= 1e-9
    names = lambda t: [[p for p, _ in side] for side in A.rank_phones(t, 5)]  # noqa: E731
    assert names(a) == names(b)
    # two utterances equal one concatenated stream, apart from the utterance count
    c = A.PhoneAttentionTable()
    A.accumulate_attention(np.concatenate([utts[0][0], utts[1][0]]), utts[0][1] + utts[1][1], c)
    d = A.PhoneAttentionTable()
    A.accumulate_attention(*utts[0], d)
    A.accumulate_attention(*utts[1], d)
    assert c.count == d.count
    assert all(abs(c.total[p] - d.total[p]) < 1e-12 for p in c.total)
    left, right = A.PhoneAttentionTable(), A.PhoneAttentionTable()
    for w, lab in utts[:5]:
        A.accumulate_attention(w, lab, left)
    for w, lab in utts[5:]:
        A.accumulate_attention(w, lab, right)
    merged = left.merge(right)
    assert merged.count == a.count and merged.n_utterances == 12


def test_rank_ties_and_single_phone():
    t = A.PhoneAttentionTable({"b": 1.0, "a": 1.0, "c": 3.0}, {"b": 2, "a": 2, "c": 2}, 1)
    top, bottom = A.rank_phones(t, 2)
    assert [p for p, _ in top] == ["c", "a"]
    assert [p for p, _ in bottom] == ["a", "b"]
    one = A.PhoneAttentionTable({"aa": 1.0}, {"aa": 4}, 1)
    assert A.rank_phones(one, 10) == ([("aa", 0.25)], [("aa", 0.25)])
    with pytest.raises(ValueError):
        A.rank_phones(A.PhoneAttentionTable(), 3)


def test_planted_vowel_attention_ranks_vowels_first():
    classes = A.phone_classes()
    vowels = sorted(p for p, k in classes.items() if k == "vowel")
    others = sorted(p for p, k in classes.items() if k in ("stop", "fricative"))
    rng = np.random.default_rng(1)
    table = A.PhoneAttentionTable()
    for _ in range(50):
        labels = list(rng.choice(vowels + others, 40))
        w = np.array([5.0 if lab in vowels else 1.0 for lab in labels]) * rng.uniform(0.9, 1.1, 40)
        A.accumulate_attention(w / w.sum(), labels, table)
    top, _ = A.rank_phones(table, 5)
    assert all(classes[p] == "vowel" for p, _ in top)


def test_phone_classes_and_report():
    classes = A.phone_classes()
    assert classes["aa"] == "vowel" and classes["t"] == "stop" and classes["s"] == "fricative"
    assert classes["h#"] == "silence"
    t = A.PhoneAttentionTable({"aa": 0.9, "s": 0.1}, {"aa": 3, "s": 2}, 1)
    text = A.report(t, 1)
    assert "highest 1 by mean" in text and "aa" in text
    assert t.to_tsv().splitlines()[0] == "phone\tclass\ttotal\tcount\tmean"
