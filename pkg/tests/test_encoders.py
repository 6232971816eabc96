"""Encoders: shape contracts, permutation invariance, shared compression."""

import numpy as np
import pytest

from jamlab import autodiff as ad
from jamlab.autodiff import Tape, Tensor
from jamlab.encoders import CompressionHead, Encoder2D, Encoder3D, EncoderDims

DIMS = EncoderDims()


def _build(seed=0):
    rng = np.random.default_rng(seed)
    return Encoder2D(DIMS, rng), Encoder3D(DIMS, rng), CompressionHead(DIMS, rng)


class TestEncoder2D:
    def test_shape_contract(self):
        enc, _, _ = _build()
        out = enc(Tensor(np.random.default_rng(1).uniform(size=(32, 32, 1))))
        assert out.shape == (4, 4, 32)

    def test_zero_image_zero_biases_gives_zero_map(self):
        enc, _, _ = _build()
        for b in enc.biases:
            b.values[:] = 0.0
        out = enc(Tensor(np.zeros((32, 32, 1))))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_wrong_dims_rejected(self):
        enc, _, _ = _build()
        with pytest.raises(ValueError, match="encode_2d"):
            enc(Tensor(np.zeros((16, 16, 1))))

    def test_distinct_images_give_distinct_maps(self):
        enc, _, _ = _build()
        rng = np.random.default_rng(2)
        collisions = 0
        for _ in range(20):
            a = enc(Tensor(rng.uniform(size=(32, 32, 1)))).values
            b = enc(Tensor(rng.uniform(size=(32, 32, 1)))).values
            collisions += int(np.abs(a - b).max() < 1e-12)
        assert collisions == 0


class TestEncoder3D:
    def test_shape_contract(self):
        _, enc, _ = _build()
        out = enc(Tensor(np.random.default_rng(3).normal(size=(256, 3))))
        assert out.shape == (4, 4, 32)

    def test_permutation_invariance_exact(self):
        _, enc, _ = _build()
        rng = np.random.default_rng(4)
        cloud = rng.normal(size=(256, 3))
        out = enc(Tensor(cloud)).values
        for _ in range(5):
            perm = rng.permutation(256)
            np.testing.assert_array_equal(enc(Tensor(cloud[perm])).values, out)

    def test_zero_cloud_zero_biases_gives_zero_map(self):
        _, enc, _ = _build()
        for b in [*enc.point_biases, enc.project_b, enc.mix_b]:
            b.values[:] = 0.0
        out = enc(Tensor(np.zeros((256, 3))))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_wrong_point_count_rejected(self):
        _, enc, _ = _build()
        with pytest.raises(ValueError, match="encode_3d"):
            enc(Tensor(np.zeros((100, 3))))

    def test_cross_branch_shape_equality(self):
        enc2, enc3, _ = _build()
        rng = np.random.default_rng(5)
        a = enc2(Tensor(rng.uniform(size=(32, 32, 1))))
        b = enc3(Tensor(rng.normal(size=(256, 3))))
        assert a.shape == b.shape


class TestCompressionHead:
    def test_dimension_contract(self):
        _, _, comp = _build()
        out = comp(Tensor(np.random.default_rng(6).normal(size=(4, 4, 32))))
        assert out.shape == (1, 64)

    def test_zero_map_zero_biases_gives_zero_embedding(self):
        _, _, comp = _build()
        comp.squeeze_b.values[:] = 0.0
        comp.fc_b.values[:] = 0.0
        out = comp(Tensor(np.zeros((4, 4, 32))))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_single_storage_moves_both_domains(self):
        _, _, comp = _build()
        rng = np.random.default_rng(7)
        map2 = Tensor(rng.normal(size=(4, 4, 32)))
        map3 = Tensor(rng.normal(size=(4, 4, 32)))
        before = comp(map2).values.copy(), comp(map3).values.copy()
        comp.fc_w.values += 0.01
        after = comp(map2).values, comp(map3).values
        assert np.abs(after[0] - before[0]).max() > 0
        assert np.abs(after[1] - before[1]).max() > 0

    def test_shape_mismatch_rejected(self):
        _, _, comp = _build()
        with pytest.raises(ValueError, match="compress"):
            comp(Tensor(np.zeros((2, 2, 32))))


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self):
        # census with the attention gain nonzero: at gamma = 0 the value
        # maps are unreachable by construction
        from jamlab.attention import JamParams, jam_forward
        from jamlab.margin import ClassifierHead, MarginParams, domain_loss
        from jamlab.entropy import BinningConfig, je_loss

        rng = np.random.default_rng(8)
        enc2, enc3, comp = _build()
        jam = JamParams(32, 16, gamma_init=0.5, rng=rng)
        head2 = ClassifierHead(64, 3, rng=rng)
        head3 = ClassifierHead(64, 3, rng=rng)
        params = {
            **enc2.named_parameters(),
            **enc3.named_parameters(),
            **jam.named_parameters(),
            **comp.named_parameters(),
            "head2d.w": head2.weights,
            "head3d.w": head3.weights,
        }
        mp = MarginParams(m=0.2, s=16.0)
        je_cfg = BinningConfig(bins=8, assignment="soft")
        seen = {name: False for name in params}
        for trial in range(3):
            with Tape() as tape:
                embs2, embs3, jes = [], [], []
                for i in range(2):
                    img = Tensor(rng.uniform(0.1, 1.0, (32, 32, 1)))
                    cld = Tensor(rng.normal(size=(256, 3)))
                    j2, a2 = jam_forward(enc2(img), jam, "2d")
                    j3, a3 = jam_forward(enc3(cld), jam, "3d")
                    embs2.append(comp(j2))
                    embs3.append(comp(j3))
                    jes.append(je_loss(a2, a3, je_cfg))
                labels = [0, 1]
                loss = ad.add(
                    ad.add(
                        domain_loss(head2, ad.concat_rows(embs2), labels, mp),
                        domain_loss(head3, ad.concat_rows(embs3), labels, mp),
                    ),
                    ad.scale(ad.add(jes[0], jes[1]), 0.5),
                )
            grads = tape.backward(loss)
            for name, p in params.items():
                if p in grads and np.abs(grads.array(p)).max() > 0:
                    seen[name] = True
        dead = [name for name, ok in seen.items() if not ok]
        assert not dead, f"parameters with no gradient: {dead}"
