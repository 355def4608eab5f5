//! Reductions, the dense layer and the classification loss.

use crate::error::{dim_err, GsfError, Result};
use crate::tensor::{Element, Tensor};

/// Mean over the two trailing (spatial) axes: `…×H×W → …`.
pub fn avg_pool_spatial<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() < 3 {
        return dim_err(format!("spatial pooling needs rank ≥ 3, got {:?}", x.shape()));
    }
    let r = x.rank();
    let area = x.dim(r - 2) * x.dim(r - 1);
    if area == 0 {
        return dim_err("spatial pooling over an empty plane");
    }
    let data = x
        .data()
        .chunks(area)
        .map(|plane| E::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / area as f64))
        .collect();
    Tensor::from_vec(&x.shape()[..r - 2], data)
}

pub fn avg_pool_spatial_backward<E: Element>(grad: &Tensor<E>, input_shape: &[usize]) -> Result<Tensor<E>> {
    let r = input_shape.len();
    let area = input_shape[r - 2] * input_shape[r - 1];
    let inv = 1.0 / area as f64;
    let mut out = Vec::with_capacity(grad.len() * area);
    for &g in grad.data() {
        let v = E::from_f64(g.as_f64() * inv);
        out.extend(std::iter::repeat_n(v, area));
    }
    Tensor::from_vec(input_shape, out)
}

/// Arithmetic mean along `axis`, which is removed from the shape.
pub fn mean_axis<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if axis >= x.rank() || x.dim(axis) == 0 {
        return dim_err(format!("cannot average axis {axis} of {:?}", x.shape()));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let n = x.dim(axis);
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let src = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..n).map(|k| src[(o * n + k) * inner + i].as_f64()).sum();
            out.push(E::from_f64(s / n as f64));
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::from_vec(&shape, out)
}

pub fn mean_axis_backward<E: Element>(grad: &Tensor<E>, input_shape: &[usize], axis: usize) -> Result<Tensor<E>> {
    let outer: usize = input_shape[..axis].iter().product();
    let n = input_shape[axis];
    let inner: usize = input_shape[axis + 1..].iter().product();
    let g = grad.data();
    let inv = 1.0 / n as f64;
    let mut out = vec![E::zero(); outer * n * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                out[(o * n + k) * inner + i] = E::from_f64(g[o * inner + i].as_f64() * inv);
            }
        }
    }
    Tensor::from_vec(input_shape, out)
}

/// `x · wᵀ + bias` for `x: N×I`, `w: O×I`, `bias: O`.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || bias.shape() != [w.dim(0)] {
        return dim_err(format!(
            "linear shapes incompatible: x {:?}, w {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            bias.shape()
        ));
    }
    let (n, i_dim, o_dim) = (x.dim(0), x.dim(1), w.dim(0));
    let mut out = Vec::with_capacity(n * o_dim);
    for r in 0..n {
        let xr = &x.data()[r * i_dim..][..i_dim];
        for o in 0..o_dim {
            let wr = &w.data()[o * i_dim..][..i_dim];
            let s: f64 = xr.iter().zip(wr).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
            out.push(E::from_f64(s + bias.data()[o].as_f64()));
        }
    }
    Tensor::from_vec(&[n, o_dim], out)
}

/// Gradients of [`linear`] for (x, w, bias).
pub fn linear_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    grad: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, i_dim, o_dim) = (x.dim(0), x.dim(1), w.dim(0));
    let g = grad.data();
    let mut gx = Vec::with_capacity(n * i_dim);
    for r in 0..n {
        for i in 0..i_dim {
            let s: f64 = (0..o_dim)
                .map(|o| g[r * o_dim + o].as_f64() * w.data()[o * i_dim + i].as_f64())
                .sum();
            gx.push(E::from_f64(s));
        }
    }
    let mut gw = Vec::with_capacity(o_dim * i_dim);
    for o in 0..o_dim {
        for i in 0..i_dim {
            let s: f64 = (0..n)
                .map(|r| g[r * o_dim + o].as_f64() * x.data()[r * i_dim + i].as_f64())
                .sum();
            gw.push(E::from_f64(s));
        }
    }
    let gb = (0..o_dim)
        .map(|o| E::from_f64((0..n).map(|r| g[r * o_dim + o].as_f64()).sum()))
        .collect();
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        Tensor::from_vec(&[o_dim], gb)?,
    ))
}

/// Row-wise softmax probabilities of `N×K` logits.
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Result<Vec<f64>> {
    if logits.rank() != 2 {
        return dim_err(format!("softmax expects N×K logits, got {:?}", logits.shape()));
    }
    let k = logits.dim(1);
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    Ok(probs)
}

/// Mean softmax cross-entropy of `N×K` logits against class labels.
/// Returns the scalar loss and the softmax probabilities.
pub fn softmax_cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<(Tensor<E>, Vec<f64>)> {
    let probs = softmax_rows(logits)?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return dim_err(format!("{} labels for {n} logit rows", labels.len()));
    }
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(GsfError::Usage(format!("label {label} out of range for {k} classes")));
        }
        loss -= probs[r * k + label].max(f64::MIN_POSITIVE).ln();
    }
    Ok((Tensor::scalar(E::from_f64(loss / n as f64)), probs))
}

pub fn softmax_cross_entropy_backward<E: Element>(
    probs: &[f64],
    labels: &[usize],
    shape: &[usize],
    grad: f64,
) -> Result<Tensor<E>> {
    let (n, k) = (shape[0], shape[1]);
    let scale = grad / n as f64;
    let mut out: Vec<E> = probs.iter().map(|&p| E::from_f64(p * scale)).collect();
    for (r, &label) in labels.iter().enumerate() {
        let i = r * k + label;
        out[i] = E::from_f64((probs[i] - 1.0) * scale);
    }
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_constant_and_mean() {
        let c = Tensor::<f32>::full(&[1, 2, 3, 4, 4], 0.7);
        let p = avg_pool_spatial(&c).unwrap();
        assert_eq!(p.shape(), &[1, 2, 3]);
        assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let x = Tensor::<f32>::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool_spatial(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn mean_axis_middle() {
        let x = Tensor::<f32>::from_vec(&[2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let m = mean_axis(&x, 1).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss.data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 1, 4]).is_err());
    }

    #[test]
    fn linear_small_case() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, -1.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[1.0, -0.5]);
    }
}
