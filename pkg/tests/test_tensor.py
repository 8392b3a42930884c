import math

import numpy as np
import pytest
import torch

from strl import tensor as T


def rand(*shape, seed=0, grad=True):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=T.DTYPE).requires_grad_(grad)


def test_softmax_uniform_on_equal_logits():
    out = T.softmax_rows(T.tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.numpy(), [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_mask_gives_exact_zeros_and_is_stable():
    x = T.tensor([[1000.0, 1001.0, -5.0], [3.0, 2.0, 1.0]])
    mask = torch.tensor([[True, True, False], [True, False, False]])
    out = T.softmax_rows(x, mask)
    assert out[0, 2].item() == 0.0
    assert out[1].tolist() == [1.0, 0.0, 0.0]
    assert torch.isfinite(out).all()
    assert out[0].sum().item() == pytest.approx(1.0, abs=1e-15)


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ValueError):
        T.softmax_rows(T.tensor([[1.0, 2.0]]), torch.tensor([[False, False]]))


def test_hadamard_identity_and_shape_errors():
    x = rand(3, 4, grad=False)
    assert torch.equal(T.hadamard(x, torch.ones_like(x)), x)
    with pytest.raises(T.ShapeError):
        T.hadamard(x, torch.ones(4, 3, dtype=T.DTYPE))
    with pytest.raises(T.ShapeError):
        T.matmul(x, x)
    with pytest.raises(T.ShapeError):
        T.add(x, torch.ones(3, dtype=T.DTYPE))


def test_matmul_by_hand():
    a = T.tensor([[1, 2, 3], [4, 5, 6]])
    b = T.tensor([[7, 8], [9, 10], [11, 12]])
    assert T.matmul(a, b).tolist() == [[58.0, 64.0], [139.0, 154.0]]


def test_concat():
    a, b = rand(2, 3, grad=False), rand(1, 3, seed=1, grad=False)
    assert T.concat_rows([a, b]).shape == (3, 3)
    assert T.concat_cols([a, a]).shape == (2, 6)
    with pytest.raises(T.ShapeError):
        T.concat_cols([a, b])


def test_layer_norm_statistics():
    y = T.layer_norm(rand(5, 16, grad=False))
    np.testing.assert_allclose(y.mean(-1).numpy(), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1, unbiased=False).numpy(), 1.0, atol=1e-3)


def test_dropout_modes():
    x = torch.ones(1000, dtype=T.DTYPE)
    assert T.dropout(x, 0.5, train=False) is x
    g = torch.Generator().manual_seed(0)
    y = T.dropout(x, 0.5, g, train=True)
    assert set(y.unique().tolist()) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, train=True)


def test_sum_gradient_is_ones():
    x = rand(3, 2)
    T.backward(T.sum(x))
    assert torch.equal(x.grad, torch.ones_like(x))


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.backward(rand(2))


def test_mse_gradient_matches_finite_differences():
    W, x, y = rand(2, 2), rand(2, seed=1, grad=False), rand(2, seed=2, grad=False)
    assert T.finite_difference_check(lambda: T.mse(W @ x, y), [W]) <= 1e-4


def test_tanh_chain_matches_finite_differences():
    W, x = rand(3, 4), rand(4, 2, seed=1)
    assert T.finite_difference_check(lambda: T.sum(T.tanh(T.matmul(W, x))), [W, x]) <= 1e-4


def test_linear_function_is_exact():
    W, x = rand(3, 3), rand(3, seed=1, grad=False)
    assert T.finite_difference_check(lambda: T.sum(W @ x), [W]) <= 1e-9


@pytest.mark.parametrize("fn", [
    T.sigmoid, T.tanh, T.elu, lambda x: T.leaky_relu(x, 0.2), T.layer_norm,
    lambda x: T.softmax_rows(x), lambda x: T.softmax_rows(x, torch.tensor([True, False, True, True])),
])
def test_primitive_gradients(fn):
    x = rand(3, 4, seed=5)
    w = rand(3, 4, seed=6, grad=False)
    assert T.finite_difference_check(lambda: T.sum(T.hadamard(fn(x), w)), [x]) <= 1e-4


def test_unseeded_dropout_rejected_seeded_accepted():
    x = rand(50)

    def noisy():
        return T.sum(T.dropout(x, 0.5, None, train=True))

    with pytest.raises(ValueError, match="deterministic"):
        T.finite_difference_check(noisy, [x])

    def seeded():
        return T.sum(T.dropout(x * x, 0.5, torch.Generator().manual_seed(3), train=True))

    assert T.finite_difference_check(seeded, [x]) <= 1e-6


def test_xavier_bounds_and_seed_derivation():
    w = T.xavier_uniform((30, 20), 7)
    assert float(w.abs().max()) <= math.sqrt(6 / 50)
    assert torch.equal(w, T.xavier_uniform((30, 20), 7))
    assert T.derive_seed(0, "a") != T.derive_seed(0, "b")
    assert T.derive_seed(1, "a") == T.derive_seed(1, "a")


def test_checkpoint_round_trip(tmp_path):
    tensors = {"w": rand(3, 4, grad=False), "nested/b": rand(2, seed=1, grad=False)}
    T.save_checkpoint(tmp_path / "c.npz", tensors, {"variant": "STRL", "dims": [1, 2]})
    back, manifest = T.load_checkpoint(tmp_path / "c.npz")
    assert manifest == {"variant": "STRL", "dims": [1, 2]}
    for k, v in tensors.items():
        assert torch.equal(back[k], v)
    assert not (tmp_path / "c.npz.tmp").exists()
