import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import _corpus
from tttlab.pipeline import (AVG_PARAGRAPH_TOKENS, FULL_SCALE, NULL_TEXT, PAD, TOY, FreeTextPrompt, ProfileConfig,
                             Storyboard, StoryboardError, assemble_sequence, build_local_mask, detokenize_text, drop_text,
                             parse_prompt, parse_storyboard, read_tokens, serialize_storyboard, tokenize_text,
                             write_sequence)

CORPUS = _corpus.load()
VALID = [(n, t, a) for n, t, a in CORPUS if a["valid"]]
MALFORMED = [(n, t, a) for n, t, a in CORPUS if not a["valid"]]


def test_corpus_size():
    assert len(CORPUS) >= 20 and len(MALFORMED) >= 5


@pytest.mark.parametrize("name,text,ann", VALID, ids=[c[0] for c in VALID])
def test_valid_fixture_parses_as_annotated(name, text, ann):
    sb = parse_storyboard(text)
    assert [len(s) for s in sb.scenes] == ann["paragraphs_per_scene"]
    assert parse_storyboard(serialize_storyboard(sb)) == sb
    assert serialize_storyboard(parse_storyboard(serialize_storyboard(sb))) == serialize_storyboard(sb)


@pytest.mark.parametrize("name,text,ann", MALFORMED, ids=[c[0] for c in MALFORMED])
def test_malformed_fixture_rejected_as_annotated(name, text, ann):
    with pytest.raises(StoryboardError) as err:
        parse_storyboard(text)
    assert err.value.line == ann["line"]
    assert ann["message"] in str(err.value)


def test_hand_enumerated_examples():
    sb = parse_storyboard("<scene start>\npA\n\npB\n<scene end>\n<scene start>\npC\n<scene end>")
    assert [len(s) for s in sb.scenes] == [2, 1]
    assert sb.paragraphs == ["pA", "pB", "pC"] and sb.scene_of_segment() == [0, 0, 1]
    assert parse_storyboard("<scene start>\npara A\n<scene end>").scenes == [["para A"]]
    with pytest.raises(StoryboardError, match="unclosed <scene start>"):
        parse_storyboard("<scene start>\npA\n")


def test_multiline_paragraph_keeps_lines():
    sb = parse_storyboard("<scene start>\nline one\nline two\n\nnext\n<scene end>\n")
    assert sb.scenes == [["line one\nline two", "next"]]


def test_free_text_prompts():
    short = parse_prompt("Tom chases Jerry. Jerry escapes.")
    assert isinstance(short, FreeTextPrompt) and short.format == 1 and len(short.sentences) == 2
    labelled = parse_prompt("Scene 1: Tom wakes up. He yawns.\nScene 2: Jerry steals cheese.")
    assert labelled.format == 2 and labelled.scene_hints == ["Scene 1", "Scene 2"]
    long = parse_prompt(" ".join(f"Sentence {i}." for i in range(12)))
    assert long.format == 2
    assert isinstance(parse_prompt("<scene start>\nx\n<scene end>"), Storyboard)


# -- tokenizer -------------------------------------------------------------------

@pytest.mark.parametrize("name,text,ann", VALID, ids=[c[0] for c in VALID])
def test_tokenizer_round_trip_on_corpus(name, text, ann):
    for p in parse_storyboard(text).paragraphs:
        ids = tokenize_text(p)
        assert np.array_equal(ids, tokenize_text(p))
        assert detokenize_text(ids) == p


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), min_size=1))
def test_tokenizer_round_trip_ascii(s):
    assert detokenize_text(tokenize_text(s)) == s


def test_tokenizer_rejects_empty_and_avoids_specials():
    with pytest.raises(ValueError):
        tokenize_text("")
    assert tokenize_text("\x00").min() > max(PAD, NULL_TEXT)


# -- sequence assembly -------------------------------------------------------------

def _board(*counts):
    return Storyboard([[f"scene {i} shot {j}" for j in range(c)] for i, c in enumerate(counts)])


def test_toy_single_segment_arithmetic():
    seq = assemble_sequence(_board(1), TOY)
    assert len(seq) == 5 + 12 and seq.n_segments == 1
    (sp,) = seq.spans
    assert (sp.text_start, sp.text_len, sp.video_start, sp.video_len) == (0, 5, 5, 12)


def test_toy_two_segments_share_one_frame():
    seq = assemble_sequence(_board(2), TOY)
    a, b = seq.spans
    assert a.video_len + b.video_len == 2 * 12 - 4
    assert (b.shared_start, b.shared_len) == (a.end - 4, 4)
    assert len(seq) == 2 * 5 + 20


def test_full_scale_context_length():
    assert FULL_SCALE.tokens_per_frame == 1350 and FULL_SCALE.overlap_frames == 1
    assert FULL_SCALE.video_tokens(21) == (21 * 13 - 20) * 1350 == 341_550
    seq = assemble_sequence(_board(*[1] * 21), FULL_SCALE)
    assert len(seq) == 341_550
    assert AVG_PARAGRAPH_TOKENS == 132


@settings(max_examples=40, deadline=None)
@given(tpf=st.integers(1, 6), frames=st.integers(2, 6), text=st.integers(0, 6), n=st.integers(1, 12),
       data=st.data())
def test_context_length_linear_and_monotone(tpf, frames, text, n, data):
    ov = data.draw(st.integers(0, frames - 1))
    p = ProfileConfig(tpf, frames, text, ov)
    step = p.context_length(n + 1) - p.context_length(n)
    assert step == (frames - ov) * tpf + text > 0
    assert p.context_length(n) == p.context_length(1) + (n - 1) * step


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(1, 3), min_size=1, max_size=4), tpf=st.integers(1, 3),
       frames=st.integers(2, 4), text=st.integers(0, 3), overlap=st.booleans())
def test_spans_tile_and_mask_properties(counts, tpf, frames, text, overlap):
    prof = ProfileConfig(tpf, frames, text, int(overlap))
    sb = _board(*counts)
    seq = assemble_sequence(sb, prof)
    assert seq.n_segments == sb.n_segments
    assert len(seq) == prof.context_length(sb.n_segments)
    # each token is owned once; owned text/video pieces tile the sequence
    owned = np.concatenate([np.arange(s.text_start, s.end) for s in seq.spans])
    assert np.array_equal(owned, np.arange(len(seq)))
    for a, b in zip(seq.spans, seq.spans[1:]):
        assert b.shared_len == prof.overlap_tokens
        assert b.shared_start + b.shared_len == a.end
    dense = build_local_mask(seq).dense()
    assert np.array_equal(dense, dense.T) and dense.diagonal().all()


def test_local_mask_enumeration_with_overlap():
    seq = assemble_sequence(_board(2), TOY)
    members = [set() for _ in range(len(seq))]
    for sp in seq.spans:
        for t in list(range(sp.text_start, sp.text_start + sp.text_len)) + list(sp.video_indices()):
            members[t].add(sp.segment)
    want = np.array([[bool(members[t] & members[s]) for s in range(len(seq))] for t in range(len(seq))])
    assert np.array_equal(build_local_mask(seq).dense(), want)
    shared = range(seq.spans[1].shared_start, seq.spans[1].shared_start + 4)
    assert all(members[t] == {0, 1} for t in shared)


def test_local_mask_without_overlap_is_block_diagonal():
    prof = ProfileConfig(4, 3, 5, overlap_frames=0)
    one = build_local_mask(assemble_sequence(_board(1), prof))
    assert one.is_full
    dense = build_local_mask(assemble_sequence(_board(2), prof)).dense()
    want = np.zeros((34, 34), bool)
    want[:17, :17] = want[17:, 17:] = True
    assert np.array_equal(dense, want)


def test_video_source_used_and_checked():
    vids = [np.arange(12) + 1000 * i for i in range(2)]
    seq = assemble_sequence(_board(2), TOY, vids)
    b = seq.spans[1]
    assert np.array_equal(seq.tokens[b.video_start:b.end], vids[1][4:])
    assert np.array_equal(seq.tokens[b.shared_start:b.shared_start + 4], vids[0][8:])
    with pytest.raises(ValueError, match="4 segments, storyboard has 2"):
        assemble_sequence(_board(2), TOY, vids + vids)
    with pytest.raises(ValueError, match="expected 12"):
        assemble_sequence(_board(2), TOY, [np.arange(12), np.arange(11)])


def test_profile_validation():
    with pytest.raises(ValueError):
        ProfileConfig(4, 3, 5, overlap_frames=3)
    with pytest.raises(ValueError):
        ProfileConfig(0, 3, 5)


def test_sequence_dump(tmp_path):
    seq = assemble_sequence(_board(1, 2), TOY)
    csv_path, bin_path = write_sequence(seq, tmp_path / "seq")
    assert np.array_equal(read_tokens(bin_path), seq.tokens)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "segment,scene,text_start,text_len,video_start,video_len,shared_start,shared_len"
    assert len(lines) == 4 and lines[3].startswith("2,1,")
    assert bin_path.stat().st_size == 4 * len(seq)


def test_text_dropout_replaces_whole_spans():
    seq = assemble_sequence(_board(3, 3), TOY)
    assert np.array_equal(drop_text(seq, np.random.default_rng(0), 0.0).tokens, seq.tokens)
    gone = drop_text(seq, np.random.default_rng(0), 1.0)
    for sp in seq.spans:
        assert np.all(gone.tokens[sp.text_start:sp.text_start + sp.text_len] == NULL_TEXT)
        assert np.array_equal(gone.tokens[sp.video_start:sp.end], seq.tokens[sp.video_start:sp.end])
    rng = np.random.default_rng(1)
    dropped = [np.all(drop_text(seq, rng).tokens[sp.text_start:sp.text_start + sp.text_len] == NULL_TEXT)
               for _ in range(400) for sp in seq.spans]
    assert 0.07 < np.mean(dropped) < 0.13
    assert np.array_equal(build_local_mask(gone).dense(), build_local_mask(seq).dense())
    with pytest.raises(ValueError):
        drop_text(seq, rng, 1.5)
