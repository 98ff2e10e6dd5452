# tests/test_corpus.py
import numpy as np
import pytest

from services.aligner import gaussian_loglik, mas_search
from services.corpus import (
    MAX_SYMBOL_FRAMES, MIN_SYMBOL_FRAMES, corpus_summary, load_corpus_dir, make_synthetic_corpus,
    symbol_template, write_corpus_dir,
)
from services.error_handler import ArtifactIOError
from services.features import MEL_FRAME_RATE
from services.text_frontend import SymbolInventory, tokenize


def test_corpus_is_deterministic():
    first = make_synthetic_corpus(3, seed=5)
    second = make_synthetic_corpus(3, seed=5)
    assert [u.text for u in first] == [u.text for u in second]
    np.testing.assert_array_equal(first[2].pose.frames, second[2].pose.frames)
    assert [u.stem for u in first] == ['synthetic_5_0000', 'synthetic_5_0001', 'synthetic_5_0002']
    assert [u.text for u in make_synthetic_corpus(3, seed=6)] != [u.text for u in first]


def test_streams_share_the_mel_frame_rate():
    for utterance in make_synthetic_corpus(4, seed=1):
        assert utterance.mel.num_frames == utterance.pose.num_frames
        assert utterance.pose.frame_rate_hz == MEL_FRAME_RATE
        assert utterance.mel.num_frames == int(utterance.durations.sum())
        assert 2 <= len(utterance.text.split()) <= 4


def test_templates_are_stable_per_symbol():
    a, b = symbol_template('AH'), symbol_template('AH')
    np.testing.assert_array_equal(a.mel, b.mel)
    assert MIN_SYMBOL_FRAMES <= a.frames <= MAX_SYMBOL_FRAMES
    assert not np.array_equal(symbol_template('k').mel, a.mel)


def test_alignment_recovers_generator_durations():
    inventory = SymbolInventory.default()
    for utterance in make_synthetic_corpus(5, seed=3):
        symbols = inventory.decode(tokenize(utterance.text, inventory=inventory).ids)
        means = np.stack([symbol_template(symbol).mel for symbol in symbols])
        alignment = mas_search(gaussian_loglik(means, utterance.mel.frames))
        np.testing.assert_array_equal(alignment.durations, utterance.durations)


def test_directory_round_trip(tmp_path):
    corpus = make_synthetic_corpus(2, seed=4)
    write_corpus_dir(corpus, str(tmp_path))
    loaded = load_corpus_dir(str(tmp_path))

    assert [u.stem for u in loaded] == [u.stem for u in corpus]
    assert [u.text for u in loaded] == [u.text for u in corpus]
    np.testing.assert_array_equal(loaded[1].mel.frames, corpus[1].mel.frames)
    assert loaded[0].durations is None
    assert (tmp_path / 'metadata.csv').read_text().splitlines()[0] == f"{corpus[0].stem}|{corpus[0].text}"


def test_missing_metadata(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_corpus_dir(str(tmp_path))


def test_summary_and_size_checks():
    corpus = make_synthetic_corpus(2, seed=0)
    summary = corpus_summary(corpus)
    assert summary['utterances'] == 2
    assert summary['seconds'] == pytest.approx(summary['frames'] / MEL_FRAME_RATE)
    assert corpus_summary([]) == {'utterances': 0, 'frames': 0, 'seconds': 0.0}
    with pytest.raises(ValueError):
        make_synthetic_corpus(0)
