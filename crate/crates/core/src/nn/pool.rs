use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor4};

/// 2x2 max pooling with stride 2.
///
/// Returns the pooled tensor and, per output element, the flat in-plane
/// index of the winning input pixel (first maximum in raster order).
pub fn maxpool2<T: Real>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let d = input.dims();
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2 needs even spatial dims, got {d}"
        )));
    }
    let (oh, ow) = (d.h / 2, d.w / 2);
    let od = Dims::new(d.n, d.c, oh, ow);
    let mut out = Vec::with_capacity(od.len());
    let mut arg = Vec::with_capacity(od.len());
    for n in 0..d.n {
        for c in 0..d.c {
            let plane = input.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * d.w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + d.w, base + d.w + 1] {
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    out.push(plane[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(od, out)?, arg))
}

/// Routes each output gradient to the stored argmax location.
pub fn maxpool2_backward<T: Real>(
    grad_out: &Tensor4<T>,
    argmax: &[u32],
    input_dims: Dims,
) -> Result<Tensor4<T>> {
    let od = grad_out.dims();
    if od.len() != argmax.len()
        || od.n != input_dims.n
        || od.c != input_dims.c
        || od.h * 2 != input_dims.h
        || od.w * 2 != input_dims.w
    {
        return Err(Error::Dimension(format!(
            "maxpool2 backward: grad {od} inconsistent with input {input_dims}"
        )));
    }
    let mut gx = Tensor4::zeros(input_dims);
    let plane_in = input_dims.plane();
    let plane_out = od.plane();
    for (p, (g, a)) in grad_out
        .data()
        .chunks(plane_out)
        .zip(argmax.chunks(plane_out))
        .enumerate()
    {
        let dst = &mut gx.data_mut()[p * plane_in..(p + 1) * plane_in];
        for (&gv, &ai) in g.iter().zip(a) {
            dst[ai as usize] += gv;
        }
    }
    Ok(gx)
}

/// Per-channel spatial mean: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    let d = input.dims();
    let inv = 1.0 / d.plane() as f64;
    let data = input
        .data()
        .chunks(d.plane())
        .map(|p| T::of(p.iter().map(|v| v.f64()).sum::<f64>() * inv))
        .collect();
    Tensor4::from_vec(Dims::new(d.n, d.c, 1, 1), data).expect("one mean per plane")
}

pub fn global_avg_pool_backward<T: Real>(
    grad_out: &Tensor4<T>,
    input_dims: Dims,
) -> Result<Tensor4<T>> {
    let gd = grad_out.dims();
    if gd != Dims::new(input_dims.n, input_dims.c, 1, 1) {
        return Err(Error::Dimension(format!(
            "GAP backward: grad {gd} does not match input {input_dims}"
        )));
    }
    let inv = T::of(1.0 / input_dims.plane() as f64);
    let mut data = Vec::with_capacity(input_dims.len());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g * inv).take(input_dims.plane()));
    }
    Tensor4::from_vec(input_dims, data)
}
