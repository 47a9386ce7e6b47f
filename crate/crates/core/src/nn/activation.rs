use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `output` is the forward result; the derivative is 1 where it is positive.
pub fn relu_backward<T: Real>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    same_dims(output, grad_out, "relu")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(output.dims(), data)
}

/// Logistic function without overflow for large |x|.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Real>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    same_dims(output, grad_out, "sigmoid")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor4::from_vec(output.dims(), data)
}

/// Softmax over the channel axis, independently for every (n, y, x).
pub fn softmax<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let d = x.dims();
    let mut out = Tensor4::zeros(d);
    let plane = d.plane();
    for n in 0..d.n {
        for p in 0..plane {
            let at = |c: usize| n * d.sample() + c * plane + p;
            let max = (0..d.c)
                .map(|c| x.data()[at(c)])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..d.c {
                let e = (x.data()[at(c)] - max).exp();
                out.data_mut()[at(c)] = e;
                sum += e;
            }
            for c in 0..d.c {
                out.data_mut()[at(c)] /= sum;
            }
        }
    }
    out
}

/// Jacobian-vector product of softmax: `y * (g - sum(g * y))`.
pub fn softmax_backward<T: Real>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    same_dims(output, grad_out, "softmax")?;
    let d = output.dims();
    let plane = d.plane();
    let mut gx = Tensor4::zeros(d);
    for n in 0..d.n {
        for p in 0..plane {
            let at = |c: usize| n * d.sample() + c * plane + p;
            let dot: T = (0..d.c)
                .map(|c| output.data()[at(c)] * grad_out.data()[at(c)])
                .sum();
            for c in 0..d.c {
                gx.data_mut()[at(c)] = output.data()[at(c)] * (grad_out.data()[at(c)] - dot);
            }
        }
    }
    Ok(gx)
}

fn same_dims<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{op} backward: grad {} vs activation {}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}
