import numpy as np
import pytest

from capnet.dataset import (BACKGROUND_RGB, END_ID, START_ID, UNK_ID, SyntheticSpec, Vocabulary, build_vocab,
                            decode_caption, encode_caption, generate_synthetic, read_manifest,
                            select_attributes, split_dataset, tokenize, write_manifest)
from capnet.errors import FormatError, GenerationError, ValidationError


def small(**kw):
    return SyntheticSpec(**{**dict(image_size=32, samples_per_class=6, seed=3), **kw})


def pixel_scan_box(img, background):
    bg = np.array(BACKGROUND_RGB[background])[:, None, None]
    fg = np.any(np.abs(img - bg) > 1e-12, axis=0)
    rows, cols = np.flatnonzero(fg.any(axis=1)), np.flatnonzero(fg.any(axis=0))
    return (cols[0], rows[0], cols[-1] - cols[0] + 1, rows[-1] - rows[0] + 1)


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_synthetic(small()), generate_synthetic(small())
        assert [s.caption for s in a] == [s.caption for s in b]
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))

    def test_seed_matters(self):
        a, b = generate_synthetic(small()), generate_synthetic(small(seed=4))
        assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, b))

    def test_template_and_bbox(self):
        for s in generate_synthetic(small(image_size=40)):
            assert s.caption[0] == "a" and s.caption[-3:-1] == ["a", s.caption[-2]]
            assert s.caption[4] == "on" and s.caption[-1] == "background"
            assert s.attributes == [w for w in s.caption if w not in ("a", "on")][:5]
            assert pixel_scan_box(s.image, s.caption[6]) == tuple(s.bbox)

    def test_red_solid_circle(self):
        spec = small(shapes=("circle",), colors=("red",), textures=("solid",), backgrounds=("white",))
        samples = generate_synthetic(spec)
        assert {" ".join(s.caption) for s in samples} == {"a red solid circle on a white background"}

    def test_oversized_object(self):
        with pytest.raises(GenerationError):
            generate_synthetic(small(max_frac=1.5))

    def test_unknown_shape(self):
        with pytest.raises(GenerationError):
            generate_synthetic(small(shapes=("hexagon",)))


class TestVocab:
    def test_counts_and_ties(self):
        cap, attr = build_vocab([["a", "b"], ["a", "c"]], max_attr_words=2)
        assert cap.tokens[4:] == ["a", "b", "c"]
        assert cap.counts == {"a": 2, "b": 1, "c": 1}
        assert attr.tokens[4:] == ["a", "b"]

    def test_word_list_filter(self):
        _, attr = build_vocab([["a", "red", "circle"]], attr_words=["red", "circle"])
        assert attr.tokens[4:] == ["circle", "red"]

    def test_empty(self):
        with pytest.raises(ValidationError):
            build_vocab([])

    def test_train_tokens_known(self):
        samples = generate_synthetic(small())
        cap, _ = build_vocab([s.caption for s in samples])
        assert all(UNK_ID not in encode_caption(s.caption, cap) for s in samples)

    def test_file_round_trip(self, tmp_path):
        v = Vocabulary(["<pad>", "<start>", "<end>", "<unk>", "x", "y"])
        v.save(tmp_path / "v.txt")
        assert Vocabulary.load(tmp_path / "v.txt").tokens == v.tokens

    def test_bad_reserved(self, tmp_path):
        (tmp_path / "v.txt").write_text("a\nb\n")
        with pytest.raises(FormatError):
            Vocabulary.load(tmp_path / "v.txt")


class TestSelectAttributes:
    def setup_method(self):
        words = "g f e d c b a".split()
        # frequencies 7..1 for g..a, plus a filler word that is not eligible
        corpus = [words[:n] for n in range(1, 8)] + [["the"]]
        _, self.attr = build_vocab(corpus, attr_words=words)

    def test_top5_by_frequency(self):
        ids = select_attributes("a b c d e f g".split(), self.attr)
        assert [self.attr.tokens[i] for i in ids] == ["g", "f", "e", "d", "c"]

    def test_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            cap = list(rng.choice(list("abcdefg") + ["the"], size=6))
            ids = select_attributes(cap, self.attr)
            assert len(ids) == 5
            expect = sorted({w for w in cap if w in self.attr}, key=lambda w: -self.attr.counts[w])[:5]
            assert [self.attr.tokens[i] for i in ids if i] == expect

    def test_padding(self):
        assert select_attributes(["g", "the", "a"], self.attr)[2:] == [0, 0, 0]
        assert select_attributes(["the"], self.attr) == [0] * 5


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(100, (70, 15, 15)), (10, (8, 1, 1)), (512, (360, 76, 76))])
    def test_sizes(self, n, sizes):
        samples = generate_synthetic(small(samples_per_class=n // 2, shapes=("circle", "square")))[:n]
        out = split_dataset(samples, seed=1)
        assert tuple(sum(s.split == k for s in out) for k in ("train", "val", "test")) == sizes
        assert sorted(s.id for s in out) == sorted(s.id for s in samples)

    def test_same_seed(self):
        samples = generate_synthetic(small())
        assert [s.id for s in split_dataset(samples, seed=5)] == [s.id for s in split_dataset(samples, seed=5)]

    def test_too_few(self):
        with pytest.raises(ValidationError):
            split_dataset(generate_synthetic(small(samples_per_class=1, shapes=("bar",))))


class TestCaptionCodec:
    def test_encode(self):
        v = Vocabulary(["<pad>", "<start>", "<end>", "<unk>", "a", "red", "circle"])
        assert encode_caption(tokenize("A red circle."), v) == [START_ID, 4, 5, 6, END_ID]
        assert encode_caption(["a", "blue"], v) == [START_ID, 4, UNK_ID, END_ID]
        assert decode_caption(encode_caption(["a", "circle"], v), v) == ["a", "circle"]


class TestManifest:
    def test_round_trip(self, tmp_path):
        samples = split_dataset(generate_synthetic(small(samples_per_class=2)), seed=0)
        write_manifest(samples, tmp_path)
        back = read_manifest(tmp_path / "manifest.tsv")
        for a, b in zip(samples, back):
            assert (a.id, a.caption, a.attributes, tuple(a.bbox), a.split) == \
                (b.id, b.caption, b.attributes, b.bbox, b.split)
            assert np.max(np.abs(a.image - b.image)) <= 1 / 510

    def test_bad_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text("x\ty\n")
        with pytest.raises(FormatError, match="m.tsv:1"):
            read_manifest(tmp_path / "m.tsv")
