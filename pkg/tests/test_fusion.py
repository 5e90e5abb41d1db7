import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptreid import autodiff as ad
from promptreid import fusion as fu
from promptreid.autodiff import GradientTape, Parameter, Tensor
from promptreid.errors import ConfigError, ShapeError

from gradcheck import assert_gradients_match

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# cross-attention
# ---------------------------------------------------------------------------


def cross_setup(batch=2, lp=5, li=4, dim=8, seed=0):
    rng = RNG(seed)
    block = fu.CrossAttentionBlock(dim, 2, rng)
    prompt = Tensor(rng.normal(size=(batch, lp, dim)))
    image = Tensor(rng.normal(size=(batch, li, dim)))
    valid = np.ones((batch, lp))
    valid[:, lp - 1 :] = 0  # trailing PAD
    eos = np.full(batch, lp - 2, dtype=np.int64)
    return block, prompt, image, valid, eos


def test_cross_attention_output_shape():
    block, prompt, image, valid, eos = cross_setup()
    out = block(prompt, image, valid, eos)
    assert out.shape == (2, 8)


def test_cross_attention_row_sums():
    block, prompt, image, valid, eos = cross_setup()
    kv = ad.concat([image, prompt], axis=1)
    mask = np.concatenate([np.ones((2, 4)), valid], axis=1)
    weights = block.attn.attention_weights(
        prompt, kv, key_mask=np.where(mask, 0.0, -1e9)[:, None, None, :]
    )
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)


def test_cross_attention_dim_mismatch():
    block, prompt, image, valid, eos = cross_setup()
    with pytest.raises(ShapeError):
        block(prompt, Tensor(np.zeros((2, 4, 6))), valid, eos)


def test_cross_attention_gradients():
    block, prompt, image, valid, eos = cross_setup(batch=1, lp=3, li=2)
    probe = Tensor(RNG(1).normal(size=(1, 8)))

    def loss():
        return ad.reduce_sum(ad.mul(block(prompt, image, valid, eos), probe))

    assert_gradients_match(loss, block.attn.named_parameters("attn."))


# ---------------------------------------------------------------------------
# explicit ensemble
# ---------------------------------------------------------------------------


def test_ensemble_shape_and_asymmetry():
    rng = RNG(2)
    ensemble = fu.ExplicitEnsemble(8, rng)
    a = Tensor(rng.normal(size=(3, 8)))
    b = Tensor(rng.normal(size=(3, 8)))
    out = ensemble(a, b)
    assert out.shape == (3, 8)
    swapped = ensemble(b, a)
    assert np.abs(out.data - swapped.data).max() > 1e-6


def test_ensemble_gradient_reaches_both_inputs():
    rng = RNG(3)
    ensemble = fu.ExplicitEnsemble(8, rng)
    a = Parameter(rng.normal(size=(2, 8)))
    b = Parameter(rng.normal(size=(2, 8)))
    with GradientTape() as tape:
        tape.register("a", a)
        tape.register("b", b)
        loss = ad.reduce_sum(ensemble(a, b))
    grads = tape.backward(loss)
    assert np.abs(grads["a"].data).max() > 0
    assert np.abs(grads["b"].data).max() > 0


def test_ensemble_dim_mismatch():
    ensemble = fu.ExplicitEnsemble(8, RNG(0))
    with pytest.raises(ShapeError):
        ensemble(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 6))))


# ---------------------------------------------------------------------------
# multi-modal transformer
# ---------------------------------------------------------------------------


def test_fuse_sequence_length():
    rng = RNG(4)
    fuser = fu.MultiModalTransformer(8, 2, 12, 1, rng)
    f_e = Tensor(rng.normal(size=(2, 8)))
    image_tokens = Tensor(rng.normal(size=(2, 5, 8)))
    seq, cls_out = fuser(f_e, image_tokens)
    assert seq.shape == (2, 1 + 1 + 5, 8)
    assert cls_out.shape == (2, 8)


def test_fuse_cls_sensitive_to_prompt_feature():
    rng = RNG(5)
    fuser = fu.MultiModalTransformer(8, 2, 12, 1, rng)
    image_tokens = Tensor(rng.normal(size=(1, 5, 8)))
    f_e = rng.normal(size=(1, 8))
    _, cls_a = fuser(Tensor(f_e), image_tokens)
    _, cls_b = fuser(Tensor(f_e + 0.1 * rng.normal(size=f_e.shape)), image_tokens)
    assert np.abs(cls_a.data - cls_b.data).max() > 0


def test_fuse_deterministic():
    rng = RNG(6)
    fuser = fu.MultiModalTransformer(8, 2, 12, 1, rng)
    f_e = Tensor(rng.normal(size=(2, 8)))
    image_tokens = Tensor(rng.normal(size=(2, 3, 8)))
    _, a = fuser(f_e, image_tokens)
    _, b = fuser(f_e, image_tokens)
    assert a.data.tobytes() == b.data.tobytes()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_logits_one_hot():
    for n in (2, 3, 7):
        logits = Tensor(np.zeros((1, n)))
        q = np.zeros((1, n))
        q[0, 0] = 1.0
        loss = fu.cross_entropy(logits, q)
        np.testing.assert_allclose(loss.data, np.log(n), atol=1e-12)


def test_cross_entropy_confident_limit():
    q = np.array([[1.0, 0.0, 0.0]])
    loss = fu.cross_entropy(Tensor(np.array([[60.0, 0.0, 0.0]])), q)
    assert float(loss.data) < 1e-12


def test_cross_entropy_matches_hand_computation():
    rng = RNG(7)
    logits = rng.normal(size=(1, 3))
    q = np.array([[0.2, 0.5, 0.3]])
    # independent evaluation of -sum q log softmax
    z = logits - logits.max()
    log_probs = z - np.log(np.exp(z).sum())
    expected = -(q * log_probs).sum()
    loss = fu.cross_entropy(Tensor(logits), q)
    np.testing.assert_allclose(loss.data, expected, atol=1e-12)


def test_cross_entropy_rejects_non_distribution():
    with pytest.raises(ConfigError):
        fu.cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.2, 0.2]]))


def test_contrastive_uniform_similarity_is_log_n():
    for n in (2, 4, 9):
        similarity = Tensor(np.full((n, n), 0.37))
        m2p = fu.image_to_prompt_loss(similarity)
        p2m = fu.prompt_to_image_loss(similarity)
        np.testing.assert_allclose(m2p.data, np.log(n), atol=1e-9)
        np.testing.assert_allclose(p2m.data, np.log(n), atol=1e-9)


def test_contrastive_two_by_two_reference_value():
    similarity = Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))
    expected = 0.12692801104297263  # -log(e^2 / (e^2 + 1))
    np.testing.assert_allclose(fu.image_to_prompt_loss(similarity).data, expected, atol=1e-12)
    np.testing.assert_allclose(fu.prompt_to_image_loss(similarity).data, expected, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
@settings(max_examples=40, deadline=None)
def test_contrastive_transpose_identity_exact(seed, n):
    s = RNG(seed).normal(size=(n, n)) * 3
    lhs = fu.image_to_prompt_loss(Tensor(s)).data
    rhs = fu.prompt_to_image_loss(Tensor(s.T)).data
    assert lhs == rhs  # bit-exact by construction


def test_contrastive_symmetric_matrix_equal_losses():
    s = RNG(8).normal(size=(4, 4))
    s = s + s.T
    m2p = fu.image_to_prompt_loss(Tensor(s)).data
    p2m = fu.prompt_to_image_loss(Tensor(s)).data
    np.testing.assert_allclose(m2p, p2m, atol=1e-12)


def test_contrastive_rejects_non_square():
    with pytest.raises(ShapeError):
        fu.image_to_prompt_loss(Tensor(np.zeros((2, 3))))


def test_implicit_ce_ordering_and_limit():
    n = 4
    strong = Tensor(np.eye(n) * 8.0)
    q = np.eye(n)
    below = fu.image_to_prompt_ce(strong, q)
    assert float(below.data) < np.log(n)
    perfect = fu.image_to_prompt_ce(Tensor(np.eye(n) * 200.0), q)
    assert float(perfect.data) < 1e-12


def test_implicit_ce_hand_computation():
    rng = RNG(9)
    s = rng.normal(size=(3, 3))
    q = fu.smoothed_targets(np.array([0, 1, 2]), 3, epsilon=0.1)
    z = s - s.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expected = -(q * log_probs).sum(axis=1).mean()
    np.testing.assert_allclose(fu.image_to_prompt_ce(Tensor(s), q).data, expected, atol=1e-12)


def test_smoothed_targets_values():
    q = fu.smoothed_targets(np.array([1]), 4, epsilon=0.1)
    np.testing.assert_allclose(q, [[0.025, 0.925, 0.025, 0.025]], atol=1e-15)
    np.testing.assert_allclose(q.sum(), 1.0, atol=1e-15)


def test_alignment_bundle_sum_and_negative_rejection():
    parts = [Tensor(np.array(v)) for v in (1.0, 2.0, 3.0, 4.0)]
    bundle = fu.combine_alignment(*parts)
    assert float(bundle.total.data) == 10.0
    with pytest.raises(ConfigError):
        fu.combine_alignment(Tensor(np.array(-0.5)), *parts[1:])


def test_alignment_gradient_is_sum_of_component_gradients():
    rng = RNG(10)
    s = Parameter(rng.normal(size=(3, 3)))
    logits = Parameter(rng.normal(size=(3, 3)))
    q = fu.smoothed_targets(np.array([0, 1, 2]), 3, epsilon=0.1)

    def build(component):
        cls_loss = fu.cross_entropy(logits, q)
        m2p = fu.image_to_prompt_loss(s)
        p2m = fu.prompt_to_image_loss(s)
        ice = fu.image_to_prompt_ce(s, q)
        parts = {"classification": cls_loss, "image_to_prompt": m2p,
                 "prompt_to_image": p2m, "implicit_ce": ice}
        if component == "total":
            return fu.combine_alignment(cls_loss, m2p, p2m, ice).total
        return parts[component]

    grads = {}
    for component in ("classification", "image_to_prompt", "prompt_to_image",
                      "implicit_ce", "total"):
        with GradientTape() as tape:
            tape.register("s", s)
            tape.register("logits", logits)
            loss = build(component)
        grads[component] = tape.backward(loss)
    for name in ("s", "logits"):
        summed = sum(
            grads[c][name].data
            for c in ("classification", "image_to_prompt", "prompt_to_image", "implicit_ce")
        )
        np.testing.assert_allclose(grads["total"][name].data, summed, atol=1e-12)


@pytest.mark.parametrize("loss_name", ["m2p", "p2m", "ice", "cls"])
def test_loss_gradients_match_finite_difference(loss_name):
    rng = RNG(11)
    s = Parameter(rng.normal(size=(4, 4)))
    q = fu.smoothed_targets(np.array([0, 1, 2, 3]), 4, epsilon=0.1)
    builders = {
        "m2p": lambda: fu.image_to_prompt_loss(s),
        "p2m": lambda: fu.prompt_to_image_loss(s),
        "ice": lambda: fu.image_to_prompt_ce(s, q),
        "cls": lambda: fu.cross_entropy(s, q),
    }
    assert_gradients_match(builders[loss_name], {"s": s})
