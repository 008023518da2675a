#pragma once

#include "cmm/tensor.hpp"

namespace cmm {

// Hyperspherical repulsion across the batch: flatten each sample, project to
// the unit sphere and penalize the mean squared off-diagonal cosine
// similarity. Identical samples score 1, an orthonormal batch scores 0.
template <class Real>
TensorT<Real> repulsion_loss(const TensorT<Real>& states) {
    const auto& sh = states.shape();
    const int B = sh[0];
    require(B >= 2, "repulsion_loss: need at least two batch slots");
    const long m = states.size() / B;
    auto u = l2_normalize_rows(reshape(states, {B, int(m)}));
    auto gram = matmul_nt(u, u);  // [B,B], diagonal ~1 by construction
    auto mask = TensorT<Real>::constant({B, B}, Real(1));
    {
        auto mv = mask.val_mut();
        for (int i = 0; i < B; ++i) mv[size_t(i) * B + i] = Real(0);
    }
    auto off = (gram * gram) * mask;
    return scale(sum_all(off), Real(1.0 / (double(B) * double(B - 1))));
}

}  // namespace cmm
