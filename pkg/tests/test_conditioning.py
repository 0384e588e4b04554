import torch

from madpan.conditioning import ToyTextEmbedder


def test_shapes_and_determinism():
    emb = ToyTextEmbedder(tokens=8, dim=32)
    e1 = emb.embed("a sunlit meadow")
    e2 = emb.embed("a sunlit meadow")
    assert e1.data.shape == (8, 32)
    assert torch.equal(e1.data, e2.data)
    assert not e1.is_null


def test_distinct_prompts_differ():
    emb = ToyTextEmbedder()
    a = emb.embed("a sunlit meadow")
    b = emb.embed("a snowy ridge")
    assert not torch.equal(a.data, b.data)


def test_empty_prompt_is_null():
    emb = ToyTextEmbedder()
    null = emb.embed("")
    assert null.is_null
    assert torch.equal(null.data, emb.null_embedding().data)


def test_null_stable_across_instances():
    a = ToyTextEmbedder().null_embedding()
    b = ToyTextEmbedder().null_embedding()
    assert torch.equal(a.data, b.data)


def test_custom_dims():
    emb = ToyTextEmbedder(tokens=4, dim=16)
    e = emb.embed("x")
    assert e.tokens == 4 and e.dim == 16
