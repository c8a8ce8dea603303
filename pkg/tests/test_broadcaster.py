import numpy as np
import pytest

from contextedit.broadcaster import TokenBroadcaster, align, alignment_targets, broadcast_ce_loss
from contextedit.errors import ContractError, DimensionError, NumericalError
from contextedit.numerics import Tensor, gradcheck
from contextedit.vocab import compose_prompt, tokenize


def brute_force_alignment(similarity: np.ndarray) -> list[int]:
    result = []
    for j in range(similarity.shape[1]):
        best = 0
        for i in range(1, similarity.shape[0]):
            if similarity[i, j] > similarity[best, j]:
                best = i
        result.append(best)
    return result


def test_similarity_is_a_cosine_matrix(rng):
    broadcaster = TokenBroadcaster(0)
    s = broadcaster.similarity(Tensor(rng.normal(size=(3, 32))), Tensor(rng.normal(size=(7, 32)))).numpy()
    assert s.shape == (3, 7)
    assert np.all(np.abs(s) <= 1.0 + 1e-12)


@pytest.mark.parametrize("case", range(100))
def test_alignment_is_scale_invariant_and_matches_oracle(case):
    rng = np.random.default_rng(case)
    broadcaster = TokenBroadcaster(case)
    n, m = int(rng.integers(1, 5)), int(rng.integers(1, 20))
    tokens, text = rng.normal(size=(n, 32)), rng.normal(size=(m, 32))
    base = broadcaster.similarity(Tensor(tokens), Tensor(text)).numpy()
    scaled = broadcaster.similarity(
        Tensor(tokens * rng.uniform(0.1, 10.0)), Tensor(text * rng.uniform(0.1, 10.0))
    ).numpy()
    assert np.array_equal(align(base), align(scaled))
    assert align(base).tolist() == brute_force_alignment(base)


def test_alignment_ties_go_to_the_smallest_index():
    assert align(np.array([[0.5, 0.2], [0.5, 0.9]])).tolist() == [0, 1]


def test_alignment_rejects_non_finite():
    with pytest.raises(NumericalError):
        align(np.array([[np.nan, 0.0]]))


def test_zero_norm_and_empty_inputs(rng):
    broadcaster = TokenBroadcaster(0)
    with pytest.raises(NumericalError):
        broadcaster.similarity(Tensor(np.zeros((1, 32))), Tensor(rng.normal(size=(2, 32))))
    with pytest.raises(ContractError):
        broadcaster.similarity(Tensor(np.zeros((0, 32))), Tensor(rng.normal(size=(2, 32))))


def test_ground_truth_alignment_follows_instructions():
    ids = tokenize(compose_prompt([["remove", "the", "bar"], ["make", "the", "circle", "red"]]))
    assert alignment_targets(ids).tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 1, 1]


def test_broadcast_loss_checks_lengths(rng):
    with pytest.raises(DimensionError):
        broadcast_ce_loss(Tensor(rng.normal(size=(2, 5))), [0, 1])


def test_broadcast_loss_matches_a_column_sum(rng):
    similarity = rng.normal(size=(3, 6))
    targets = [0, 0, 1, 1, 2, 2]
    total = 0.0
    for j, target in enumerate(targets):
        column = similarity[:, j]
        total += -np.log(np.exp(column[target]) / np.exp(column).sum())
    assert abs(broadcast_ce_loss(Tensor(similarity), targets).item() - total / 6) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_broadcaster_gradients(seed):
    rng = np.random.default_rng(seed)
    broadcaster = TokenBroadcaster(seed)
    tokens = Tensor(rng.normal(size=(3, 32)), requires_grad=True)
    text = Tensor(rng.normal(size=(9, 32)))
    targets = rng.integers(0, 3, size=9)

    def fn() -> Tensor:
        return broadcast_ce_loss(broadcaster.similarity(tokens, text), targets)

    assert gradcheck(fn, [broadcaster.W_O, broadcaster.W_T, tokens], samples_per_tensor=20, rng=rng) <= 1e-4
