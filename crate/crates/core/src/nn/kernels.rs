//! Direct 3x3 convolution kernels for large, thin feature maps.
//!
//! im2col + GEMM is memory bound when the channel count is small and the
//! plane is large (the full-resolution U-Net levels). These kernels work on a
//! zero-padded copy of the input and keep a block of output rows in
//! registers. They are compiled three times (AVX-512, AVX2, baseline) and
//! picked at runtime. Lane width is fixed and no fused multiply-add is used,
//! so every variant produces identical bits.

use crate::tensor::Real;

/// Lanes per register block along a row.
const LANES: usize = 16;
/// Output channels per register block.
const CO_BLOCK: usize = 4;

/// Zero-padded copy of one `(c, h, w)` sample: one pixel of padding on top,
/// bottom and left, `1 + LANES` on the right so every lane load is in bounds.
pub(crate) struct Padded<T> {
    pub data: Vec<T>,
    pub h: usize,
    pub w: usize,
    pub row: usize,
    pub plane: usize,
}

impl<T: Real> Padded<T> {
    pub fn new(x: &[T], c: usize, h: usize, w: usize) -> Self {
        let row = w + 2 + LANES;
        let plane = (h + 2) * row;
        let mut data = vec![T::zero(); c * plane];
        for ci in 0..c {
            for y in 0..h {
                let src = &x[(ci * h + y) * w..(ci * h + y + 1) * w];
                let off = ci * plane + (y + 1) * row + 1;
                data[off..off + w].copy_from_slice(src);
            }
        }
        Padded {
            data,
            h,
            w,
            row,
            plane,
        }
    }
}

/// Weights rearranged to `[co_block][ci][tap][CO_BLOCK]`, zero-filled past `c_out`.
pub(crate) fn pack_weights<T: Real>(
    weight: &[T],
    c_out: usize,
    c_in: usize,
    flip_transpose: bool,
) -> Vec<T> {
    // flip_transpose: treat `weight` as (c_in_orig=c_out, c_out_orig=c_in) and
    // use w'[co][ci][t] = w[ci][co][8 - t] (adjoint of same-padded conv).
    let blocks = c_out.div_ceil(CO_BLOCK);
    let mut packed = vec![T::zero(); blocks * c_in * 9 * CO_BLOCK];
    for co in 0..c_out {
        let (blk, b) = (co / CO_BLOCK, co % CO_BLOCK);
        for ci in 0..c_in {
            for t in 0..9 {
                let v = if flip_transpose {
                    weight[(ci * c_out + co) * 9 + (8 - t)]
                } else {
                    weight[(co * c_in + ci) * 9 + t]
                };
                packed[((blk * c_in + ci) * 9 + t) * CO_BLOCK + b] = v;
            }
        }
    }
    packed
}

// Accumulators below are plain local arrays indexed only by constants after
// unrolling; that keeps them in vector registers.

#[inline(always)]
fn load<T: Real>(src: &[T], at: usize) -> [T; LANES] {
    src[at..at + LANES].try_into().unwrap()
}

#[inline(always)]
fn conv_fwd_impl<T: Real>(
    xp: &Padded<T>,
    c_in: usize,
    packed: &[T],
    bias: &[T],
    c_out: usize,
    out: &mut [T],
) {
    let (h, w) = (xp.h, xp.w);
    let hw = h * w;
    for blk in 0..c_out.div_ceil(CO_BLOCK) {
        let co0 = blk * CO_BLOCK;
        let nb = CO_BLOCK.min(c_out - co0);
        let mut b0 = [T::zero(); CO_BLOCK];
        b0[..nb].copy_from_slice(&bias[co0..co0 + nb]);
        let wblk = &packed[blk * c_in * 9 * CO_BLOCK..(blk + 1) * c_in * 9 * CO_BLOCK];
        for y in 0..h {
            let mut x0 = 0;
            while x0 < w {
                let mut acc = [[T::zero(); LANES]; CO_BLOCK];
                for b in 0..CO_BLOCK {
                    acc[b] = [b0[b]; LANES];
                }
                for ci in 0..c_in {
                    let base = ci * xp.plane + x0;
                    for ky in 0..3 {
                        let row = &xp.data[base + (y + ky) * xp.row..];
                        for kx in 0..3 {
                            let v = load(row, kx);
                            let wt: [T; CO_BLOCK] = wblk[(ci * 9 + ky * 3 + kx) * CO_BLOCK..]
                                [..CO_BLOCK]
                                .try_into()
                                .unwrap();
                            for b in 0..CO_BLOCK {
                                for i in 0..LANES {
                                    acc[b][i] = acc[b][i] + wt[b] * v[i];
                                }
                            }
                        }
                    }
                }
                let len = LANES.min(w - x0);
                for b in 0..CO_BLOCK {
                    if b < nb {
                        let lanes = acc[b];
                        out[(co0 + b) * hw + y * w + x0..][..len].copy_from_slice(&lanes[..len]);
                    }
                }
                x0 += LANES;
            }
        }
    }
}

/// dW[co][ci][tap] += sum over plane of g[co] * shifted x[ci].
#[inline(always)]
fn conv_wgrad_impl<T: Real>(
    xp: &Padded<T>,
    c_in: usize,
    gp: &Padded<T>,
    c_out: usize,
    gw: &mut [T],
) {
    let (h, w) = (xp.h, xp.w);
    for co in 0..c_out {
        for ci in 0..c_in {
            let mut acc = [[T::zero(); LANES]; 9];
            for y in 0..h {
                // gp row y+1 from col 1 holds g[y]; lanes past the end read zero padding
                let grow = &gp.data[co * gp.plane + (y + 1) * gp.row + 1..];
                let mut x0 = 0;
                while x0 < w {
                    let g = load(grow, x0);
                    for ky in 0..3 {
                        let row = &xp.data[ci * xp.plane + (y + ky) * xp.row + x0..];
                        for kx in 0..3 {
                            let v = load(row, kx);
                            for i in 0..LANES {
                                acc[ky * 3 + kx][i] = acc[ky * 3 + kx][i] + g[i] * v[i];
                            }
                        }
                    }
                    x0 += LANES;
                }
            }
            let dst = &mut gw[(co * c_in + ci) * 9..][..9];
            for t in 0..9 {
                let mut s = T::zero();
                for i in 0..LANES {
                    s += acc[t][i];
                }
                dst[t] += s;
            }
        }
    }
}

macro_rules! multiversion {
    ($name:ident, $imp:ident, ($($arg:ident : $ty:ty),*)) => {
        pub(crate) fn $name<T: Real>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,avx2")]
                unsafe fn avx512<T: Real>($($arg: $ty),*) {
                    $imp::<T>($($arg),*)
                }
                #[target_feature(enable = "avx2")]
                unsafe fn avx2<T: Real>($($arg: $ty),*) {
                    $imp::<T>($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: required CPU features were detected at runtime.
                    return unsafe { avx512::<T>($($arg),*) };
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: as above.
                    return unsafe { avx2::<T>($($arg),*) };
                }
            }
            $imp::<T>($($arg),*)
        }
    };
}

multiversion!(conv3x3_forward, conv_fwd_impl, (xp: &Padded<T>, c_in: usize, packed: &[T], bias: &[T], c_out: usize, out: &mut [T]));
multiversion!(conv3x3_weight_grad, conv_wgrad_impl, (xp: &Padded<T>, c_in: usize, gp: &Padded<T>, c_out: usize, gw: &mut [T]));
