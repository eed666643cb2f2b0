"""
Bit budgets and reconstruction overhead
=======================================

Closed-form sizes for a 256x256x3x3 layer, the point where storing the
latent sparsely starts to pay, and the extra MACs of rebuilding weights.
"""
from fractions import Fraction

from qspca import codec

# 256x256x3x3 tiled with d=256 gives a 256 x 2304 tile matrix
rep = codec.layer_size_bits((256, 256, 3, 3), d=256, k=128, b_c=4, b_z=3, r=0.25)
print("weights", rep.weight_elements, " codebook", rep.codebook_elements, " latent", rep.latent_elements)
print(f"L_o = {rep.L_o:,} bits")
print(f"L_c = {rep.codebook_bits:,} + {rep.mask_bits:,} + {rep.latent_bits:,} + {rep.L_q:,} = {rep.L_c:,} bits")
print(f"C_r = {float(rep.C_r):.2f}")

# the mask costs one bit per latent entry, so sparse storage wins only
# once the pruned fraction r exceeds 1/b_z
print("\nb_z  break-even r  sparse wins at r=0.25?")
for b_z in range(2, 9):
    r = codec.layer_size_bits((256, 256, 3, 3), 256, 128, 4, b_z, r=0.25)
    print(f"{b_z:3d}  {str(Fraction(1, b_z)):>12s}  {r.sparse_pays_off}")

# a network ratio: two such layers plus some uncompressed parameters
L_u = 32 * 1_000_000
print(f"\nnetwork C_r with 1M uncompressed floats: {float(codec.network_ratio([rep, rep], L_u)):.2f}")

# reconstructing W costs k MACs per weight, against p per weight for the conv
for hw in (56, 28, 14, 7):
    ov = codec.overhead((256, 256, 3, 3), 128, hw * hw, 4, 3)
    print(f"p = {hw}x{hw:<3d} extra MACs {float(ov.relative):8.2%}   extra BOPs {float(ov.bop_relative):7.2%}")
