from django.test import SimpleTestCase

from django_region_captioning.vocabulary import OOV, OOV_INDEX, STOP, STOP_INDEX, Vocabulary, build_vocab


class TestBuildVocab(SimpleTestCase):
    def test_reserved_tokens_first_then_by_count(self) -> None:
        vocab = build_vocab([["a", "red", "circle"], ["a", "blue", "circle"], ["a", "red", "square"]])
        self.assertEqual(vocab.tokens, (STOP, OOV, "a", "circle", "red", "blue", "square"))

    def test_min_count_drops_rare_tokens(self) -> None:
        vocab = build_vocab([["a", "red"], ["a", "blue"]], min_count=2)
        self.assertEqual(vocab.tokens, (STOP, OOV, "a"))
        self.assertEqual(vocab.index("red"), OOV_INDEX)
        with self.assertRaises(ValueError):
            build_vocab([], min_count=0)

    def test_reserved_spellings_are_not_counted(self) -> None:
        self.assertEqual(build_vocab([[STOP, "a", OOV]]).tokens, (STOP, OOV, "a"))


class TestVocabulary(SimpleTestCase):
    def setUp(self) -> None:
        self.vocab = build_vocab([["a", "red", "circle"]])

    def test_encode_appends_stop(self) -> None:
        self.assertEqual(self.vocab.encode(["a", "green", "circle"]), [2, OOV_INDEX, 3, STOP_INDEX])

    def test_decode(self) -> None:
        self.assertEqual(self.vocab.decode([2, 4, STOP_INDEX, 3]), ["a", "red"])
        self.assertEqual(self.vocab.decode([2, STOP_INDEX], strip_stop=False), ["a", STOP])
        with self.assertRaises(ValueError):
            self.vocab.decode([len(self.vocab)])

    def test_membership(self) -> None:
        self.assertIn("red", self.vocab)
        self.assertNotIn("green", self.vocab)
        self.assertEqual(len(self.vocab), 5)

    def test_invalid_token_lists(self) -> None:
        with self.assertRaises(ValueError):
            Vocabulary(tokens=("a", STOP, OOV))
        with self.assertRaises(ValueError):
            Vocabulary(tokens=(STOP, OOV, "a", "a"))
