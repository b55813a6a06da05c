import numpy as np
import pytest

from anycell.errors import ConfigError, ValidationError
from anycell.prompt_encoder import PromptEncoder, dense_positional_encoding, encode_prompts, frequencies, positional_encoding
from anycell.selection import Prompt, PromptSet


@pytest.fixture
def enc():
    return PromptEncoder(64, np.random.default_rng(0))


def test_label_difference(enc):
    a = encode_prompts(PromptSet([Prompt(5, 9, 1), Prompt(5, 9, 0)]), 64, enc).tokens
    # exact up to the rounding of the shared positional term
    np.testing.assert_allclose(a[0] - a[1], enc.label_pos.value - enc.label_neg.value, rtol=0, atol=1e-14)


def test_permutation(enc):
    ps = [Prompt(1, 2, 1), Prompt(30, 4, 0), Prompt(63, 63, 1)]
    a = encode_prompts(PromptSet(ps), 64, enc).tokens
    b = encode_prompts(PromptSet([ps[2], ps[0], ps[1]]), 64, enc).tokens
    np.testing.assert_array_equal(a[[2, 0, 1]], b)


def test_token_counts(enc):
    ps = PromptSet([Prompt(i, i, 1) for i in range(5)])
    assert encode_prompts(ps, 64, enc).tokens.shape == (5, 64)
    empty = encode_prompts(PromptSet([]), 64, enc).tokens
    assert empty.shape == (1, 64)
    np.testing.assert_array_equal(empty[0], enc.no_prompt.value)


def test_all_frozen(enc):
    assert all(not p.trainable for p in enc.params())


def test_no_collisions_on_256_grid():
    n = 256
    c = (np.arange(n) + 0.5) / n
    ux, uy = np.meshgrid(c, c)
    codes = positional_encoding(ux.ravel(), uy.ravel(), 64)
    rounded = np.round(codes, 9)
    assert len({r.tobytes() for r in rounded}) == n * n


def test_out_of_bounds(enc):
    with pytest.raises(ValidationError, match="Prompt"):
        encode_prompts(PromptSet([Prompt(64, 0, 1)]), 64, enc)


def test_width_rules():
    with pytest.raises(ConfigError):
        frequencies(30)
    np.testing.assert_allclose(frequencies(4), [np.pi])
    f = frequencies(64)
    assert f[0] == pytest.approx(np.pi) and f[-1] == pytest.approx(64 * np.pi)


def test_dense_layout():
    d = dense_positional_encoding(8, 64, 16)
    assert d.shape == (64, 16)
    np.testing.assert_allclose(d[9], positional_encoding(12 / 64, 12 / 64, 16))
