import warnings
from fractions import Fraction

import numpy as np
import pytest

from fuzz import random_layer
from qspca import codec
from qspca.factorizer import CalibrationSet, FactorPair, FixedIterations, SolverConfig, reconstruct
from qspca.pipeline import compress_layer, synthetic_layer
from qspca.quantizer import IDENTITY, SIGNED, QuantConfig


def example_pair(z_values, b_z=3, mask=None):
    z = np.array([z_values], dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return FactorPair(np.ones((2, 1)), z, np.ones(1), np.ones(1), QuantConfig(4, SIGNED, "per_column"),
                          QuantConfig(b_z, SIGNED, "per_row"), mask)


class TestBitPacking:
    def test_two_complement_fields(self):
        # 3 -> 011, -1 -> 111, 2 -> 010, written LSB first: 1,1,0, 1,1,1, 0,1,0
        assert codec.pack_fields([3, -1, 2], 3) == bytes([0b10111011, 0b0])

    @pytest.mark.parametrize("bits", range(2, 9))
    def test_round_trip(self, rng, bits):
        vals = rng.integers(-(2 ** (bits - 1)), 2 ** (bits - 1), 37)
        back = codec.unpack_fields(codec.pack_fields(vals, bits), 37, bits, signed=True)
        np.testing.assert_array_equal(back, vals)
        uvals = rng.integers(0, 2**bits, 37)
        np.testing.assert_array_equal(codec.unpack_fields(codec.pack_fields(uvals, bits), 37, bits, False), uvals)


class TestEncode:
    def test_hand_example(self):
        c = codec.encode(example_pair([3, 0, -1, 2]), None, (1, 1, 2, 4))
        np.testing.assert_array_equal(c.mask, [[True, False, True, True]])
        np.testing.assert_array_equal(c.z_values, [3, -1, 2])
        blob = codec.to_bytes(c)
        lay = codec.layout(blob)
        start = codec.HEADER_BYTES + lay.c_bytes
        assert blob[start] == 0b1101  # mask 1,0,1,1 LSB first
        assert blob[start + 1:start + 3] == bytes([0b10111011, 0])

    def test_all_zero_latent(self):
        c = codec.encode(example_pair([0, 0, 0, 0]), None, (1, 1, 2, 4))
        assert c.nnz == 0 and not c.mask.any()
        lay = codec.layout(codec.to_bytes(c))
        assert lay.z_bytes == 0 and lay.mask_bytes == 1

    def test_pruned_entries_not_stored(self):
        mask = np.array([[True, True, False, True]])
        c = codec.encode(example_pair([3, 1, -1, 2], mask=mask), None, (1, 1, 2, 4))
        np.testing.assert_array_equal(c.z_values, [3, 1, 2])

    def test_identity_rejected(self):
        F = example_pair([1, 2, 3, 4]).replace(z_config=QuantConfig(mode=IDENTITY, axis="per_row"))
        with pytest.raises(codec.CodecError):
            codec.encode(F, None, (1, 1, 2, 4))

    def test_idempotent(self, rng):
        for _ in range(50):
            F, mean, shape = random_layer(rng)
            blob = codec.to_bytes(codec.encode(F, mean, shape))
            F2, mean2, shape2 = codec.decode(codec.from_bytes(blob))
            assert codec.to_bytes(codec.encode(F2, mean2, shape2)) == blob
            np.testing.assert_array_equal(F2.Zq.codes * F2.mask, F.Zq.codes * F.mask)

    def test_reconstruction_bit_exact(self, rng):
        for _ in range(50):
            F, mean, shape = random_layer(rng)
            F2, mean2, _ = codec.decode(codec.from_bytes(codec.to_bytes(codec.encode(F, mean, shape))))
            assert reconstruct(F2, mean2, shape).data.tobytes() == reconstruct(F, mean, shape).data.tobytes()

    def test_solver_output_round_trip(self):
        W, X, Y, spec = synthetic_layer(shape=(8, 8, 3, 3), m=16)
        cal = CalibrationSet.from_arrays(X, Y, spec)
        res = compress_layer(W, cal, 8, 4, solver=SolverConfig(extra_sparsity=0.2, stopping=FixedIterations(3)))
        F, mean, shape = codec.decode(codec.from_bytes(res.to_bytes()))
        assert reconstruct(F, mean, shape, np.float32).data.tobytes() == res.reconstruct(np.float32).data.tobytes()
        assert F.nnz() == res.size.nnz


class TestMalformed:
    def blob(self):
        return codec.to_bytes(codec.encode(example_pair([3, 0, -1, 2]), None, (1, 1, 2, 4)))

    def test_bad_magic(self):
        with pytest.raises(codec.CodecError, match="magic"):
            codec.from_bytes(b"XXXX" + self.blob()[4:])

    def test_bad_version(self):
        b = bytearray(self.blob())
        b[4] = 9
        with pytest.raises(codec.CodecError, match="version"):
            codec.from_bytes(bytes(b))

    @pytest.mark.parametrize("cut", [1, 5, 40])
    def test_truncated(self, cut):
        with pytest.raises(codec.CodecError):
            codec.from_bytes(self.blob()[:-cut])

    def test_trailing_garbage(self):
        with pytest.raises(codec.CodecError, match="oversized"):
            codec.from_bytes(self.blob() + b"\0")

    def test_popcount_mismatch(self):
        b = bytearray(self.blob())
        b[codec.HEADER_BYTES + codec.layout(bytes(b)).c_bytes] = 0b0001
        with pytest.raises(codec.CodecError, match="set bits"):
            codec.from_bytes(bytes(b))

    def test_decode_popcount_mismatch(self):
        c = codec.encode(example_pair([3, 0, -1, 2]), None, (1, 1, 2, 4))
        from dataclasses import replace
        with pytest.raises(codec.CodecError):
            codec.decode(replace(c, z_values=c.z_values[:2]))

    def test_empty_mask_decodes_to_zero(self):
        c = codec.encode(example_pair([0, 0, 0, 0]), None, (1, 1, 2, 4))
        F, _, _ = codec.decode(codec.from_bytes(codec.to_bytes(c)))
        np.testing.assert_array_equal(F.masked_latent(), 0.0)


class TestSizeAccounting:
    def test_worked_example(self):
        rep = codec.layer_size_bits((256, 256, 3, 3), 256, 128, 4, 3, r=0.25)
        assert rep.nnz == 221184
        assert rep.L_o == 18_874_368
        assert (rep.codebook_bits, rep.mask_bits, rep.latent_bits, rep.L_q) == (131072, 294912, 663552, 4096)
        assert rep.L_c == 1_093_632
        assert round(float(rep.C_r), 2) == 17.26
        assert rep.C_r == Fraction(18_874_368, 1_093_632)

    def test_no_payoff_when_dense(self):
        rep = codec.layer_size_bits((1, 1, 4, 8), 4, 2, 4, 3, r=0)
        assert rep.sparse_latent_bits - rep.dense_latent_bits == rep.latent_elements
        assert not rep.sparse_pays_off

    def test_no_free_compression(self):
        # 32-bit factors with k = d = n: codebook plus latent alone reach L_o
        rep = codec.layer_size_bits((1, 1, 8, 8), 8, 8, 8, 8, r=0)
        codebook = rep.codebook_elements * 32
        latent = rep.latent_elements * 32
        assert codebook + latent >= rep.L_o

    def test_non_integral_nnz(self):
        with pytest.raises(ValueError):
            codec.layer_size_bits((1, 1, 4, 6), 4, 1, 4, 4, r=0.25)

    def test_network_single_layer(self):
        rep = codec.layer_size_bits((256, 256, 3, 3), 256, 128, 4, 3, r=0.25)
        assert codec.network_ratio([rep]) == rep.C_r

    def test_network_two_layers_plus_uncompressed(self):
        rep = codec.layer_size_bits((256, 256, 3, 3), 256, 128, 4, 3, r=0.25)
        assert codec.network_ratio([rep, rep], L_u=rep.L_c) == Fraction(2 * rep.L_o, 3 * rep.L_c)

    def test_network_monotone_in_uncompressed(self):
        rep = codec.layer_size_bits((16, 16, 3, 3), 16, 8, 4, 4, r=0)
        ratios = [codec.network_ratio([rep], L_u=10**e) for e in range(0, 15)]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))
        assert float(ratios[-1]) < 1e-6

    def test_report_for_uses_stored_nonzeros(self):
        F = example_pair([3, 0, -1, 2])
        assert codec.report_for(F, (1, 1, 2, 4)).nnz == 3


class TestOverhead:
    def test_large_map(self):
        rep = codec.overhead((256, 256, 3, 3), 128, 56 * 56)
        assert rep.relative == Fraction(128, 3136)
        assert f"{float(rep.relative):.2%}" == "4.08%"

    def test_small_map(self):
        rep = codec.overhead((256, 256, 3, 3), 128, 49)
        assert f"{float(rep.relative):.1%}" == "261.2%"

    def test_k_equals_p(self):
        assert codec.overhead((8, 8, 3, 3), 16, 16).relative == 1

    def test_bops(self):
        rep = codec.overhead((8, 8, 3, 3), 16, 16, 4, 4)
        assert rep.bop_relative == Fraction(16, 1024)
