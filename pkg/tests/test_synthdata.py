import filecmp
import os

import numpy as np
import pytest

from cifalign.errors import BadFractions, CorruptFile
from cifalign.synthdata import (MANIFEST, SynthConfig, generate_corpus, generate_utterances,
                                load_corpus, make_prototypes, read_corpus_config,
                                sentiment_label, split_corpus)


@pytest.fixture(scope="module")
def corpus():
    return generate_utterances(SynthConfig(seed=3), 200)


class TestGeneration:
    def test_three_frame_token_is_fifteen_ms(self):
        utt = generate_utterances(SynthConfig(frames_per_token=(3, 3)), 1)[0]
        assert all(r - l == 15.0 for _, l, r in utt.gold_boundaries.entries)

    def test_boundaries_tile_the_utterance(self, corpus):
        for u in corpus:
            e = u.gold_boundaries.entries
            assert [k for k, _, _ in e] == list(range(len(u.token_ids)))
            assert e[0][1] == 0.0
            assert e[-1][2] == u.raw_frames.shape[0] * u.raw_hop_ms
            assert all(a[2] == b[1] for a, b in zip(e, e[1:]))
            assert all(r > l for _, l, r in e)

    def test_frames_follow_prototypes(self):
        cfg = SynthConfig(noise_sigma=0.0, seed=1)
        protos = make_prototypes(cfg)
        u = generate_utterances(cfg, 1)[0]
        expect = np.repeat(protos[u.token_ids], u.frame_counts, axis=0)
        np.testing.assert_array_equal(u.raw_frames, expect)

    def test_labels_follow_valence(self, corpus):
        cfg = SynthConfig(seed=3)
        for u in corpus:
            total = sum(cfg.sentiment_map[t] for t in u.token_ids)
            assert u.label == (0 if total < 0 else 1 if total == 0 else 2)

    def test_all_zero_map_is_neutral(self):
        utts = generate_utterances(SynthConfig(sentiment_map=(0,) * 32), 30)
        assert {u.label for u in utts} == {1}

    def test_all_three_classes_present(self):
        labels = [u.label for u in generate_utterances(SynthConfig(), 1000)]
        counts = np.bincount(labels, minlength=3)
        assert counts.min() > 0

    def test_prototypes_well_separated(self):
        cfg = SynthConfig()
        p = make_prototypes(cfg)
        d = np.linalg.norm(p[:, None] - p[None], axis=-1) + np.eye(cfg.vocab) * 1e9
        assert d.min() > 4 * cfg.noise_sigma

    def test_sign_bucket(self):
        assert sentiment_label([0, 1], (-1, -1, 1)) == 0
        assert sentiment_label([0, 2], (-1, -1, 1)) == 1
        assert sentiment_label([2], (-1, -1, 1)) == 2

    @pytest.mark.parametrize("bad", [dict(vocab=4), dict(frames_per_token=(5, 2)),
                                     dict(noise_sigma=-0.1), dict(sentiment_map=(2,) * 32)])
    def test_rejects_bad_config(self, bad):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


class TestDisk:
    def test_byte_identical_runs(self, tmp_path):
        generate_corpus(SynthConfig(seed=7), 20, tmp_path / "a")
        generate_corpus(SynthConfig(seed=7), 20, tmp_path / "b")
        for root, _, files in os.walk(tmp_path / "a"):
            for f in files:
                other = os.path.join(tmp_path / "b", os.path.relpath(os.path.join(root, f),
                                                                     tmp_path / "a"))
                assert filecmp.cmp(os.path.join(root, f), other, shallow=False)

    def test_roundtrip_100(self, tmp_path):
        made = generate_corpus(SynthConfig(seed=2), 100, tmp_path)
        back = list(load_corpus(tmp_path))
        assert len(back) == 100
        for a, b in zip(made, back):
            assert a.utterance_id == b.utterance_id and a.label == b.label
            assert a.raw_frames.tobytes() == b.raw_frames.tobytes()
            np.testing.assert_array_equal(a.token_ids, b.token_ids)
            assert a.gold_boundaries.entries == b.gold_boundaries.entries
        assert read_corpus_config(tmp_path) == SynthConfig(seed=2)

    def test_truncated_frames(self, tmp_path):
        generate_corpus(SynthConfig(), 5, tmp_path)
        target = tmp_path / "frames" / "utt000003.tnsr"
        target.write_bytes(target.read_bytes()[:-10])
        stream = load_corpus(tmp_path)
        for _ in range(3):
            next(stream)
        with pytest.raises(CorruptFile) as info:
            next(stream)
        assert info.value.record_index == 3

    def test_truncated_manifest_line(self, tmp_path):
        generate_corpus(SynthConfig(), 3, tmp_path)
        text = (tmp_path / MANIFEST).read_text()
        (tmp_path / MANIFEST).write_text(text[:-25])
        with pytest.raises(CorruptFile):
            list(load_corpus(tmp_path))

    def test_empty_manifest(self, tmp_path):
        (tmp_path / MANIFEST).write_text("")
        assert list(load_corpus(tmp_path)) == []


class TestSplit:
    def test_sizes(self, corpus):
        tr, dev, te = split_corpus(corpus[:100], (0.8, 0.1, 0.1), seed=0)
        assert (len(tr), len(dev), len(te)) == (80, 10, 10)

    def test_partition(self, corpus):
        parts = split_corpus(corpus, seed=4)
        ids = [u.utterance_id for part in parts for u in part]
        assert sorted(ids) == sorted(u.utterance_id for u in corpus)
        assert len(set(ids)) == len(ids)

    def test_deterministic(self, corpus):
        a = split_corpus(corpus, seed=9)
        b = split_corpus(corpus, seed=9)
        assert [[u.utterance_id for u in p] for p in a] == [[u.utterance_id for u in p] for p in b]

    @pytest.mark.parametrize("fr", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1), (0.5, 0.5)])
    def test_bad_fractions(self, corpus, fr):
        with pytest.raises(BadFractions):
            split_corpus(corpus, fr)
