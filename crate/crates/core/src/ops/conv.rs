//! Direct cross-correlation kernels (no kernel flip, zero padding).
//!
//! Every output plane is accumulated in `f64` and written back once, so the
//! result is independent of how planes are distributed over threads.

use crate::error::{config_err, dim_err, Result};
use crate::parallel::for_each_plane;
use crate::tensor::{Element, Tensor};

/// Range of output positions `o` for which `o * stride + tap - pad` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, tap: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if len + pad > tap {
        ((len + pad - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if len + 2 * pad < k {
        return dim_err(format!(
            "kernel extent {k} exceeds padded input extent {}",
            len + 2 * pad
        ));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return dim_err(format!(
                "conv2d expects rank-4 input and kernel, got {input:?} and {kernel:?}"
            ));
        }
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return config_err(format!("conv2d kernel {kh}x{kw} must have odd extents"));
        }
        if stride == 0 {
            return config_err("conv2d stride must be at least 1");
        }
        if kernel[1] != input[1] {
            return dim_err(format!(
                "conv2d kernel expects {} input channels, input has {}",
                kernel[1], input[1]
            ));
        }
        Ok(Conv2dGeometry {
            batch: input[0],
            c_in: input[1],
            c_out: kernel[0],
            h: input[2],
            w: input[3],
            kh,
            kw,
            h_out: out_extent(input[2], kh, stride, pad)?,
            w_out: out_extent(input[3], kw, stride, pad)?,
            stride,
            pad,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.h_out * self.w_out * self.c_in * self.kh * self.kw) as u64
    }
}

pub fn conv2d<E: Element>(input: &Tensor<E>, kernel: &Tensor<E>, stride: usize, pad: usize) -> Result<Tensor<E>> {
    let g = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let x = input.data();
    let k = kernel.data();
    let plane = g.h_out * g.w_out;
    let mut out = vec![E::zero(); g.batch * g.c_out * plane];
    for_each_plane(&mut out, plane, |p, dst| {
        let (b, co) = (p / g.c_out, p % g.c_out);
        let mut acc = vec![0.0f64; plane];
        for ci in 0..g.c_in {
            let x_plane = &x[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            let k_plane = &k[(co * g.c_in + ci) * g.kh * g.kw..][..g.kh * g.kw];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, ky, g.pad, g.stride);
                for kx in 0..g.kw {
                    let wv = k_plane[ky * g.kw + kx].as_f64();
                    let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, kx, g.pad, g.stride);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let x_row = &x_plane[iy * g.w..][..g.w];
                        let acc_row = &mut acc[oy * g.w_out..][..g.w_out];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            for (a, &xv) in acc_row[ox_lo..ox_hi].iter_mut().zip(&x_row[ix0..ix0 + (ox_hi - ox_lo)]) {
                                *a += wv * xv.as_f64();
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc_row[ox] += wv * x_row[ox * g.stride + kx - g.pad].as_f64();
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = E::from_f64(a);
        }
    });
    Tensor::from_vec(&g.output_shape(), out)
}

/// Vector-Jacobian products of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let g = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    if grad_out.shape() != g.output_shape() {
        return dim_err("conv2d gradient shape mismatch");
    }
    let x = input.data();
    let k = kernel.data();
    let dy = grad_out.data();
    let out_plane = g.h_out * g.w_out;

    let in_plane = g.h * g.w;
    let mut dx = vec![E::zero(); input.len()];
    for_each_plane(&mut dx, in_plane, |p, dst| {
        let (b, ci) = (p / g.c_in, p % g.c_in);
        let mut acc = vec![0.0f64; in_plane];
        for co in 0..g.c_out {
            let dy_plane = &dy[(b * g.c_out + co) * out_plane..][..out_plane];
            let k_plane = &k[(co * g.c_in + ci) * g.kh * g.kw..][..g.kh * g.kw];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, ky, g.pad, g.stride);
                for kx in 0..g.kw {
                    let wv = k_plane[ky * g.kw + kx].as_f64();
                    let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, kx, g.pad, g.stride);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dy_row = &dy_plane[oy * g.w_out..][..g.w_out];
                        let acc_row = &mut acc[iy * g.w..][..g.w];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            for (a, &gv) in acc_row[ix0..ix0 + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&dy_row[ox_lo..ox_hi])
                            {
                                *a += wv * gv.as_f64();
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc_row[ox * g.stride + kx - g.pad] += wv * dy_row[ox].as_f64();
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = E::from_f64(a);
        }
    });

    let k_plane = g.kh * g.kw;
    let mut dk = vec![E::zero(); kernel.len()];
    for_each_plane(&mut dk, k_plane, |p, dst| {
        let (co, ci) = (p / g.c_in, p % g.c_in);
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, ky, g.pad, g.stride);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, kx, g.pad, g.stride);
                let mut acc = 0.0f64;
                for b in 0..g.batch {
                    let x_plane = &x[(b * g.c_in + ci) * in_plane..][..in_plane];
                    let dy_plane = &dy[(b * g.c_out + co) * out_plane..][..out_plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let x_row = &x_plane[iy * g.w..][..g.w];
                        let dy_row = &dy_plane[oy * g.w_out..][..g.w_out];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            acc += dy_row[ox_lo..ox_hi]
                                .iter()
                                .zip(&x_row[ix0..ix0 + (ox_hi - ox_lo)])
                                .map(|(&a, &b)| a.as_f64() * b.as_f64())
                                .sum::<f64>();
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += dy_row[ox].as_f64() * x_row[ox * g.stride + kx - g.pad].as_f64();
                            }
                        }
                    }
                }
                dst[ky * g.kw + kx] = E::from_f64(acc);
            }
        }
    });

    Ok((
        Tensor::from_vec(input.shape(), dx)?,
        Tensor::from_vec(kernel.shape(), dk)?,
    ))
}

/// Geometry of a grouped 3D convolution producing one output plane per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub channels: usize,
    pub groups: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: (usize, usize, usize),
    pub t_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv3dGeometry {
    pub fn new(input: &[usize], kernel: &[usize], pad: (usize, usize, usize)) -> Result<Self> {
        if input.len() != 5 || kernel.len() != 5 {
            return dim_err(format!(
                "grouped conv3d expects rank-5 input and kernel, got {input:?} and {kernel:?}"
            ));
        }
        let groups = kernel[0];
        if groups == 0 || !input[1].is_multiple_of(groups) {
            return config_err(format!("{} channels cannot be split into {groups} groups", input[1]));
        }
        if kernel[1] != input[1] / groups {
            return dim_err(format!(
                "kernel expects {} channels per group, input provides {}",
                kernel[1],
                input[1] / groups
            ));
        }
        let (kt, kh, kw) = (kernel[2], kernel[3], kernel[4]);
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return config_err(format!("conv3d kernel {kt}x{kh}x{kw} must have odd extents"));
        }
        Ok(Conv3dGeometry {
            batch: input[0],
            channels: input[1],
            groups,
            t: input[2],
            h: input[3],
            w: input[4],
            kt,
            kh,
            kw,
            pad,
            t_out: out_extent(input[2], kt, 1, pad.0)?,
            h_out: out_extent(input[3], kh, 1, pad.1)?,
            w_out: out_extent(input[4], kw, 1, pad.2)?,
        })
    }

    pub fn per_group(&self) -> usize {
        self.channels / self.groups
    }

    pub fn output_shape(&self) -> [usize; 5] {
        [self.batch, self.groups, self.t_out, self.h_out, self.w_out]
    }

    pub fn macs(&self) -> u64 {
        (self.batch
            * self.groups
            * self.t_out
            * self.h_out
            * self.w_out
            * self.per_group()
            * self.kt
            * self.kh
            * self.kw) as u64
    }
}

/// Grouped 3D cross-correlation with a single output plane per group.
///
/// Input `B×C×T×H×W`, kernel `G×(C/G)×kt×kh×kw`, output `B×G×T'×H'×W'`.
pub fn conv3d_grouped_single_plane<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Result<Tensor<E>> {
    let g = Conv3dGeometry::new(input.shape(), kernel.shape(), pad)?;
    let x = input.data();
    let k = kernel.data();
    let cg = g.per_group();
    let in_vol = g.t * g.h * g.w;
    let out_vol = g.t_out * g.h_out * g.w_out;
    let k_vol = g.kt * g.kh * g.kw;
    let mut out = vec![E::zero(); g.batch * g.groups * out_vol];
    for_each_plane(&mut out, out_vol, |p, dst| {
        let (b, grp) = (p / g.groups, p % g.groups);
        let mut acc = vec![0.0f64; out_vol];
        for cl in 0..cg {
            let c = grp * cg + cl;
            let x_vol = &x[(b * g.channels + c) * in_vol..][..in_vol];
            let k_vol_slice = &k[(grp * cg + cl) * k_vol..][..k_vol];
            for dt in 0..g.kt {
                let (ot_lo, ot_hi) = valid_range(g.t, g.t_out, dt, g.pad.0, 1);
                for dy in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, dy, g.pad.1, 1);
                    for dx in 0..g.kw {
                        let wv = k_vol_slice[(dt * g.kh + dy) * g.kw + dx].as_f64();
                        let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, dx, g.pad.2, 1);
                        let ix0 = ox_lo + dx - g.pad.2;
                        let n = ox_hi - ox_lo;
                        for ot in ot_lo..ot_hi {
                            let it = ot + dt - g.pad.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy + dy - g.pad.1;
                                let x_row = &x_vol[(it * g.h + iy) * g.w + ix0..][..n];
                                let acc_row = &mut acc[(ot * g.h_out + oy) * g.w_out + ox_lo..][..n];
                                for (a, &xv) in acc_row.iter_mut().zip(x_row) {
                                    *a += wv * xv.as_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = E::from_f64(a);
        }
    });
    Tensor::from_vec(&g.output_shape(), out)
}

pub fn conv3d_grouped_single_plane_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &Tensor<E>,
    pad: (usize, usize, usize),
) -> Result<(Tensor<E>, Tensor<E>)> {
    let g = Conv3dGeometry::new(input.shape(), kernel.shape(), pad)?;
    if grad_out.shape() != g.output_shape() {
        return dim_err("conv3d gradient shape mismatch");
    }
    let x = input.data();
    let k = kernel.data();
    let dy = grad_out.data();
    let cg = g.per_group();
    let in_vol = g.t * g.h * g.w;
    let out_vol = g.t_out * g.h_out * g.w_out;
    let k_vol = g.kt * g.kh * g.kw;

    let mut dx_buf = vec![E::zero(); input.len()];
    for_each_plane(&mut dx_buf, in_vol, |p, dst| {
        let (b, c) = (p / g.channels, p % g.channels);
        let grp = c / cg;
        let dy_vol = &dy[(b * g.groups + grp) * out_vol..][..out_vol];
        let k_vol_slice = &k[c * k_vol..][..k_vol];
        let mut acc = vec![0.0f64; in_vol];
        for dt in 0..g.kt {
            let (ot_lo, ot_hi) = valid_range(g.t, g.t_out, dt, g.pad.0, 1);
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, ky, g.pad.1, 1);
                for kx in 0..g.kw {
                    let wv = k_vol_slice[(dt * g.kh + ky) * g.kw + kx].as_f64();
                    let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, kx, g.pad.2, 1);
                    let ix0 = ox_lo + kx - g.pad.2;
                    let n = ox_hi - ox_lo;
                    for ot in ot_lo..ot_hi {
                        let it = ot + dt - g.pad.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad.1;
                            let dy_row = &dy_vol[(ot * g.h_out + oy) * g.w_out + ox_lo..][..n];
                            let acc_row = &mut acc[(it * g.h + iy) * g.w + ix0..][..n];
                            for (a, &gv) in acc_row.iter_mut().zip(dy_row) {
                                *a += wv * gv.as_f64();
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = E::from_f64(a);
        }
    });

    let mut dk = vec![E::zero(); kernel.len()];
    for_each_plane(&mut dk, k_vol, |p, dst| {
        // Kernel rows are laid out (group, channel-in-group), i.e. by absolute channel.
        let c = p;
        let grp = c / cg;
        for dt in 0..g.kt {
            let (ot_lo, ot_hi) = valid_range(g.t, g.t_out, dt, g.pad.0, 1);
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.h, g.h_out, ky, g.pad.1, 1);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = valid_range(g.w, g.w_out, kx, g.pad.2, 1);
                    let ix0 = ox_lo + kx - g.pad.2;
                    let n = ox_hi - ox_lo;
                    let mut acc = 0.0f64;
                    for b in 0..g.batch {
                        let x_vol = &x[(b * g.channels + c) * in_vol..][..in_vol];
                        let dy_vol = &dy[(b * g.groups + grp) * out_vol..][..out_vol];
                        for ot in ot_lo..ot_hi {
                            let it = ot + dt - g.pad.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - g.pad.1;
                                let x_row = &x_vol[(it * g.h + iy) * g.w + ix0..][..n];
                                let dy_row = &dy_vol[(ot * g.h_out + oy) * g.w_out + ox_lo..][..n];
                                acc += x_row
                                    .iter()
                                    .zip(dy_row)
                                    .map(|(&a, &b)| a.as_f64() * b.as_f64())
                                    .sum::<f64>();
                            }
                        }
                    }
                    dst[(dt * g.kh + ky) * g.kw + kx] = E::from_f64(acc);
                }
            }
        }
    });

    Ok((
        Tensor::from_vec(input.shape(), dx_buf)?,
        Tensor::from_vec(kernel.shape(), dk)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_three_by_three_sums_to_nine() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn centered_delta_is_identity() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 3, 4], (0..12).map(|v| v as f32).collect()).unwrap();
        let mut k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 1).unwrap(), x);
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[2, 3, 9, 7]);
        let k = Tensor::<f32>::zeros(&[4, 3, 3, 5]);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        // (9 + 2 - 3)/2 + 1 = 5, (7 + 2 - 5)/2 + 1 = 3
        assert_eq!(y.shape(), &[2, 4, 5, 3]);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let even = Tensor::<f32>::zeros(&[1, 2, 2, 3]);
        assert!(matches!(conv2d(&x, &even, 1, 0), Err(crate::GsfError::Config(_))));
        let wrong_cin = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &wrong_cin, 1, 0),
            Err(crate::GsfError::Dimension(_))
        ));
    }

    #[test]
    fn conv3d_zero_kernel_and_delta() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 3, 3], (0..18).map(|v| v as f32 - 4.0).collect()).unwrap();
        let zero = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        let y = conv3d_grouped_single_plane(&x, &zero, (1, 1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let mut delta = zero.clone();
        delta.set(&[0, 0, 1, 1, 1], 1.0);
        assert_eq!(conv3d_grouped_single_plane(&x, &delta, (1, 1, 1)).unwrap(), x);
    }

    #[test]
    fn conv3d_rejects_indivisible_groups() {
        let x = Tensor::<f32>::zeros(&[1, 5, 2, 3, 3]);
        let k = Tensor::<f32>::zeros(&[2, 2, 3, 3, 3]);
        assert!(matches!(
            conv3d_grouped_single_plane(&x, &k, (1, 1, 1)),
            Err(crate::GsfError::Config(_))
        ));
    }
}
