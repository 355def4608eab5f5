//! Data movement: permutation, axis slicing and concatenation, temporal shift.

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

pub fn permute<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Result<Tensor<E>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return dim_err(format!("{perm:?} is not a permutation of rank {rank}"));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * in_shape[a + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(src[off]);
        for a in (0..rank).rev() {
            index[a] += 1;
            off += strides[a];
            if index[a] < out_shape[a] {
                break;
            }
            off -= strides[a] * index[a];
            index[a] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Elements `[start, start + len)` along `axis`.
pub fn slice_axis<E: Element>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
    if axis >= x.rank() || start + len > x.dim(axis) {
        return dim_err(format!(
            "slice [{start}, {}) out of range on axis {axis} of {:?}",
            start + len,
            x.shape()
        ));
    }
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * n + start) * inner..][..len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(&shape, out)
}

/// Scatters `grad` back into a zero tensor of `full_shape` at the slice position.
pub fn slice_axis_backward<E: Element>(
    grad: &Tensor<E>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Result<Tensor<E>> {
    let (outer, n, inner) = split_at_axis(full_shape, axis);
    let len = grad.dim(axis);
    let mut out = vec![E::zero(); outer * n * inner];
    for o in 0..outer {
        out[(o * n + start) * inner..][..len * inner].copy_from_slice(&grad.data()[o * len * inner..][..len * inner]);
    }
    Tensor::from_vec(full_shape, out)
}

pub fn concat_axis<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = match parts.first() {
        Some(p) => *p,
        None => return dim_err("concat of zero tensors"),
    };
    if axis >= first.rank() {
        return dim_err(format!("concat axis {axis} out of range for {:?}", first.shape()));
    }
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(a, (x, y))| a == axis || x == y);
        if !compatible {
            return dim_err(format!(
                "cannot concat {:?} with {:?} on axis {axis}",
                p.shape(),
                first.shape()
            ));
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * chunk..][..chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::from_vec(&shape, out)
}

/// Direction of a one-step temporal shift on `B×C×T×H×W` tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    /// Frame `t` receives frame `t + 1`; the last frame becomes zero.
    Forward,
    /// Frame `t` receives frame `t − 1`; the first frame becomes zero.
    Backward,
}

impl ShiftDirection {
    pub fn reversed(self) -> Self {
        match self {
            ShiftDirection::Forward => ShiftDirection::Backward,
            ShiftDirection::Backward => ShiftDirection::Forward,
        }
    }
}

pub fn shift_time<E: Element>(x: &Tensor<E>, direction: ShiftDirection) -> Result<Tensor<E>> {
    if x.rank() != 5 {
        return dim_err(format!("temporal shift expects B×C×T×H×W, got {:?}", x.shape()));
    }
    let t = x.dim(2);
    let frame = x.dim(3) * x.dim(4);
    let mut out = vec![E::zero(); x.len()];
    if t > 1 {
        for (dst, src) in out.chunks_mut(t * frame).zip(x.data().chunks(t * frame)) {
            match direction {
                ShiftDirection::Forward => {
                    dst[..(t - 1) * frame].copy_from_slice(&src[frame..]);
                }
                ShiftDirection::Backward => {
                    dst[frame..].copy_from_slice(&src[..(t - 1) * frame]);
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn permute_round_trips() {
        let x = seq(&[2, 3, 4, 1, 2]);
        let perm = [0, 2, 1, 3, 4];
        let y = permute(&x, &perm).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 1, 2]);
        assert_eq!(y.at(&[1, 3, 2, 0, 1]), x.at(&[1, 2, 3, 0, 1]));
        assert_eq!(permute(&y, &inverse_permutation(&perm)).unwrap(), x);
    }

    #[test]
    fn permute_rejects_duplicates() {
        assert!(permute(&seq(&[2, 2]), &[0, 0]).is_err());
    }

    #[test]
    fn slice_and_concat_invert() {
        let x = seq(&[2, 5, 3]);
        let a = slice_axis(&x, 1, 0, 2).unwrap();
        let b = slice_axis(&x, 1, 2, 3).unwrap();
        assert_eq!(concat_axis(&[&a, &b], 1).unwrap(), x);
        let back = slice_axis_backward(&b, x.shape(), 1, 2).unwrap();
        assert_eq!(back.at(&[1, 4, 2]), x.at(&[1, 4, 2]));
        assert_eq!(back.at(&[1, 1, 2]), 0.0);
    }

    #[test]
    fn shifts_on_three_frames() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            shift_time(&x, ShiftDirection::Forward).unwrap().data(),
            &[2.0, 3.0, 0.0]
        );
        assert_eq!(
            shift_time(&x, ShiftDirection::Backward).unwrap().data(),
            &[0.0, 1.0, 2.0]
        );
    }

    #[test]
    fn single_frame_shift_is_zero() {
        let x = Tensor::<f32>::ones(&[2, 3, 1, 2, 2]);
        for d in [ShiftDirection::Forward, ShiftDirection::Backward] {
            assert!(shift_time(&x, d).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }
}
