"""Tests for the patch encoder, decoder, head growth, and checkpoints."""

import json
import zipfile

import numpy as np
import pytest
import torch

from tisskit.errors import ConfigurationError, ModelError
from tisskit.model import (
    ModelConfig,
    PatchStates,
    SegViT,
    decode,
    grow_head,
    load_checkpoint,
    save_checkpoint,
    segment,
    snapshot,
)

SMALL = ModelConfig(image_size=32, patch_size=8, embed_dim=32, n_layers=2, n_heads=4, seed=0)


def rand_images(rng, n, size):
    return torch.from_numpy(rng.random((n, 3, size, size), dtype=np.float32))


class TestModelConfig:
    def test_grid_properties(self):
        cfg = ModelConfig()
        assert cfg.grid_size == 8
        assert cfg.n_patches == 64

    def test_rejects_indivisible_patch(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(image_size=60, patch_size=8)

    def test_rejects_single_layer(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(n_layers=1)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(embed_dim=100, n_heads=3)


class TestPatchStates:
    def test_layer_access_is_one_based(self):
        layers = tuple(torch.zeros(4, 8) for _ in range(3))
        states = PatchStates(layers=layers)
        assert states.depth == 3
        assert states.layer(1) is layers[0]
        assert states.layer(3) is layers[2]
        assert states.first is layers[0]
        assert states.last is layers[2]
        for bad in (0, 4):
            with pytest.raises(ModelError):
                states.layer(bad)

    def test_rejects_too_few_layers(self):
        with pytest.raises(ModelError):
            PatchStates(layers=(torch.zeros(4, 8),))

    def test_rejects_mixed_shapes(self):
        with pytest.raises(ModelError):
            PatchStates(layers=(torch.zeros(4, 8), torch.zeros(4, 9)))


class TestEncode:
    def test_state_shapes(self):
        net = SegViT(SMALL, n_classes=3)
        x = rand_images(np.random.default_rng(0), 2, 32)
        states = net.encode(x)
        assert states.depth == SMALL.n_layers
        for h in states.layers:
            assert h.shape == (2, SMALL.n_patches, SMALL.embed_dim)

    def test_deterministic(self):
        net = SegViT(SMALL, n_classes=3)
        x = rand_images(np.random.default_rng(1), 2, 32)
        a = net.encode(x).last
        b = net.encode(x).last
        assert torch.equal(a, b)

    def test_construction_is_a_function_of_config(self):
        a = SegViT(SMALL, n_classes=3).state_dict()
        b = SegViT(SMALL, n_classes=3).state_dict()
        for name in a:
            assert torch.equal(a[name], b[name]), name
        c = SegViT(ModelConfig(**{**SMALL.__dict__, "seed": 1}), n_classes=3).state_dict()
        assert any(not torch.equal(a[n], c[n]) for n in a)

    def test_patch_permutation_equivariance_without_positions(self):
        # with positional embeddings removed, swapping two input patches
        # must swap the corresponding state rows and leave the rest alone
        net = SegViT(SMALL, n_classes=3)
        with torch.no_grad():
            net.pos_embed.zero_()
        rng = np.random.default_rng(2)
        x = rand_images(rng, 1, 32)
        x_swapped = x.clone()
        x_swapped[:, :, 0:8, 0:8] = x[:, :, 0:8, 8:16]
        x_swapped[:, :, 0:8, 8:16] = x[:, :, 0:8, 0:8]
        base = net.encode(x).last[0]
        swapped = net.encode(x_swapped).last[0]
        assert torch.allclose(swapped[0], base[1], atol=1e-5)
        assert torch.allclose(swapped[1], base[0], atol=1e-5)
        assert torch.allclose(swapped[2:], base[2:], atol=1e-5)

    def test_outputs_finite_on_random_images(self):
        net = SegViT(SMALL, n_classes=4)
        rng = np.random.default_rng(3)
        for _ in range(10):
            logits, states = net(rand_images(rng, 100, 32))
            assert torch.isfinite(logits).all()
            assert all(torch.isfinite(h).all() for h in states.layers)

    def test_rejects_bad_inputs(self):
        net = SegViT(SMALL, n_classes=3)
        with pytest.raises(ModelError):
            net.encode(torch.rand(1, 3, 16, 16))
        with pytest.raises(ModelError):
            net.encode(torch.rand(1, 1, 32, 32))
        with pytest.raises(ModelError):
            net.encode(torch.rand(1, 3, 32, 32) + 2.0)
        with pytest.raises(ModelError):
            net.encode(torch.randint(0, 2, (1, 3, 32, 32)))


class TestDecode:
    def test_zero_weights_give_constant_bias_map(self):
        states = PatchStates(layers=(torch.randn(2, 16, 8), torch.randn(2, 16, 8)))
        head = torch.nn.Linear(8, 3)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
        out = decode(states, head, out_size=32)
        assert out.shape == (2, 3, 32, 32)
        for c, b in enumerate((0.5, -1.0, 2.0)):
            assert torch.allclose(out[:, c], torch.full((2, 32, 32), b), atol=1e-6)

    def test_single_patch_broadcasts_everywhere(self):
        cfg = ModelConfig(image_size=8, patch_size=8, embed_dim=32, n_layers=2, n_heads=4)
        net = SegViT(cfg, n_classes=3)
        logits, states = net(rand_images(np.random.default_rng(4), 1, 8))
        per_patch = net.head(states.last)[0, 0]
        for c in range(3):
            assert torch.allclose(logits[0, c], per_patch[c].expand(8, 8), atol=1e-6)

    def test_rejects_dimension_mismatch(self):
        states = PatchStates(layers=(torch.randn(16, 8), torch.randn(16, 8)))
        with pytest.raises(ModelError):
            decode(states, torch.nn.Linear(9, 3), out_size=32)

    def test_rejects_non_square_grid(self):
        states = PatchStates(layers=(torch.randn(3, 8), torch.randn(3, 8)))
        with pytest.raises(ModelError):
            decode(states, torch.nn.Linear(8, 2), out_size=8)


class TestSegment:
    def test_matches_per_pixel_argmax(self):
        rng = np.random.default_rng(5)
        logits = torch.from_numpy(rng.standard_normal((3, 4, 4)).astype(np.float32))
        labels = segment(logits)
        for i in range(4):
            for j in range(4):
                scores = [float(logits[c, i, j]) for c in range(3)]
                assert labels[i, j] == scores.index(max(scores))

    def test_ties_go_to_the_lowest_class(self):
        logits = torch.ones(3, 2, 2)
        assert segment(logits).tolist() == [[0, 0], [0, 0]]

    def test_batched_shape_and_dtype(self):
        labels = segment(torch.randn(2, 5, 4, 4))
        assert labels.shape == (2, 4, 4)
        assert labels.dtype == np.int64

    def test_rejects_bad_rank(self):
        with pytest.raises(ModelError):
            segment(torch.randn(4, 4))


class TestGrowHead:
    def make_head(self, seed=0, d=16, c=4):
        torch.manual_seed(seed)
        return torch.nn.Linear(d, c)

    def test_old_rows_copied_verbatim(self):
        head = self.make_head()
        for variant in ("probability_preserving", "paper_literal"):
            grown = grow_head(head, 2, variant=variant)
            assert torch.equal(grown.weight[:4], head.weight)
            assert torch.equal(grown.bias[1:4], head.bias[1:4])
            assert torch.equal(grown.weight[4:], head.weight[0].expand(2, -1))

    def test_probability_preserving_splits_background_mass(self):
        head = self.make_head(seed=1)
        grown = grow_head(head, 2, variant="probability_preserving")
        rng = np.random.default_rng(6)
        feats = torch.from_numpy(rng.standard_normal((10, 16)).astype(np.float32))
        p_old = torch.softmax(head(feats), dim=-1)
        p_new = torch.softmax(grown(feats), dim=-1)
        # non-background probabilities are exactly preserved
        assert torch.allclose(p_new[:, 1:4], p_old[:, 1:4], atol=1e-6)
        # background plus the grown rows recover the old background mass
        bucket = p_new[:, 0] + p_new[:, 4:].sum(dim=-1)
        assert torch.allclose(bucket, p_old[:, 0], atol=1e-6)
        # the split is even
        assert torch.allclose(p_new[:, 0], p_old[:, 0] / 3, atol=1e-6)
        assert torch.allclose(p_new[:, 4], p_old[:, 0] / 3, atol=1e-6)

    def test_paper_literal_bias_shift(self):
        head = self.make_head(seed=2)
        grown = grow_head(head, 1, variant="paper_literal")
        # log(1) = 0, so a single new row starts as an exact background copy
        assert torch.equal(grown.bias[4], head.bias[0])
        assert torch.equal(grown.bias[:4], head.bias)
        grown2 = grow_head(head, 3, variant="paper_literal")
        expected = float(head.bias.detach()[0]) - float(np.log(3.0))
        assert float(grown2.bias.detach()[4]) == pytest.approx(expected, rel=1e-6)

    def test_probability_preserving_keeps_foreground_argmax(self):
        # growing lowers only the background score (its mass is shared with
        # the new rows), so foreground wins survive and background pixels
        # can flip to an old class but never to a brand-new one
        head = self.make_head(seed=3)
        grown = grow_head(head, 2, variant="probability_preserving")
        rng = np.random.default_rng(7)
        feats = torch.from_numpy(rng.standard_normal((200, 16)).astype(np.float32))
        before = head(feats).argmax(dim=-1).numpy()
        after = segment(grown(feats).T.unsqueeze(-1))[:, 0]
        fg = before != 0
        assert np.array_equal(before[fg], after[fg])
        assert np.all(after[~fg] < 4)

    def test_rejects_bad_arguments(self):
        head = self.make_head()
        with pytest.raises(ConfigurationError):
            grow_head(head, 0)
        with pytest.raises(ConfigurationError):
            grow_head(head, 1, variant="mystery")


class TestSnapshot:
    def test_teacher_is_isolated_from_further_training(self):
        net = SegViT(SMALL, n_classes=3)
        x = rand_images(np.random.default_rng(8), 2, 32)
        teacher = snapshot(net)
        ref_logits, _ = teacher(x)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.1)
        logits_after, _ = teacher(x)
        assert torch.equal(ref_logits, logits_after)
        assert not teacher.training
        assert all(not p.requires_grad for p in teacher.parameters())

    def test_teacher_matches_student_at_copy_time(self):
        net = SegViT(SMALL, n_classes=3)
        teacher = snapshot(net)
        x = rand_images(np.random.default_rng(9), 2, 32)
        net.eval()
        with torch.no_grad():
            a, _ = net(x)
            b, _ = teacher(x)
        assert torch.equal(a, b)


class TestCheckpoint:
    def test_round_trip_preserves_forward_exactly(self, tmp_path):
        net = SegViT(SMALL, n_classes=3)
        path = save_checkpoint(tmp_path / "m.ckpt", net, extra={"step_index": 2})
        loaded, extra = load_checkpoint(path)
        assert extra == {"step_index": 2}
        x = rand_images(np.random.default_rng(10), 2, 32)
        net.eval()
        loaded.eval()
        with torch.no_grad():
            a, _ = net(x)
            b, _ = loaded(x)
        assert torch.equal(a, b)

    def test_identical_states_write_identical_bytes(self, tmp_path):
        net = SegViT(SMALL, n_classes=3)
        p1 = save_checkpoint(tmp_path / "a.ckpt", net, extra={"k": 1})
        p2 = save_checkpoint(tmp_path / "b.ckpt", net, extra={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_grown_model_round_trips(self, tmp_path):
        net = SegViT(SMALL, n_classes=3)
        net.head = grow_head(net.head, 2)
        net.n_classes = 5
        path = save_checkpoint(tmp_path / "g.ckpt", net)
        loaded, _ = load_checkpoint(path)
        assert loaded.head.out_features == 5
        assert torch.equal(loaded.head.bias, net.head.bias)

    def test_config_mismatch_raises(self, tmp_path):
        net = SegViT(SMALL, n_classes=3)
        path = save_checkpoint(tmp_path / "m.ckpt", net)
        other = ModelConfig(**{**SMALL.__dict__, "seed": 9})
        with pytest.raises(ConfigurationError):
            load_checkpoint(path, expected_config=other)

    def test_truncated_parameters_raise(self, tmp_path):
        net = SegViT(SMALL, n_classes=3)
        path = save_checkpoint(tmp_path / "m.ckpt", net)
        with zipfile.ZipFile(path) as zf:
            header = zf.read("header.json")
            raw = zf.read("params.bin")
        bad = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(bad, "w") as zf:
            zf.writestr("header.json", header)
            zf.writestr("params.bin", raw[:-4])
        with pytest.raises(ConfigurationError):
            load_checkpoint(bad)

    def test_wrong_format_tag_raises(self, tmp_path):
        net = SegViT(SMALL, n_classes=3)
        path = save_checkpoint(tmp_path / "m.ckpt", net)
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            raw = zf.read("params.bin")
        header["format"] = "something-else"
        bad = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(bad, "w") as zf:
            zf.writestr("header.json", json.dumps(header))
            zf.writestr("params.bin", raw)
        with pytest.raises(ConfigurationError):
            load_checkpoint(bad)

    def test_not_a_zip_raises(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not an archive")
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)
