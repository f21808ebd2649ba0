//! Raw loops behind the tape ops. All kernels are deterministic: each output
//! element is produced by one fixed-order loop no matter how rows are spread
//! across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

/// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `floor(k / 2)` zeros on each side.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        }
    }
}

/// `floor((extent + 2·pad − kernel) / stride) + 1`.
pub fn conv_output_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv",
            msg: format!("kernel ({kernel}) and stride ({stride}) must be at least 1"),
        });
    }
    let padded = extent + 2 * padding.amount(kernel);
    if kernel > padded {
        return Err(TensorError::KernelTooLarge {
            op: "conv",
            kernel,
            padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, out): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `aᵀ · g` for `a[m×k]`, `g[m×n]`, giving `k×n`.
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let row = |(r, out): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + r];
            if av == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `g · bᵀ` for `g[m×n]`, `b[k×n]`, giving `m×k`.
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    let row = |(i, out): (usize, &mut [f64])| {
        let g_row = &g[i * n..(i + 1) * n];
        for (r, o) in out.iter_mut().enumerate() {
            let b_row = &b[r * n..(r + 1) * n];
            *o = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
    c
}

/// Geometry of an NHWC convolution with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        h: usize,
        w: usize,
        cin: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let oh = conv_output_extent(h, k, stride, padding)?;
        let ow = conv_output_extent(w, k, stride, padding)?;
        Ok(Self {
            batch,
            h,
            w,
            cin,
            k,
            stride,
            pad: padding.amount(k),
            oh,
            ow,
        })
    }

    pub fn positions(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Source coordinate for output `o` and kernel tap `t`, if inside the input.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x[B,H,W,C]` into rows of `k·k·C` patch values, one row per output pixel.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cin;
    let mut cols = vec![0.0; g.positions() * kk];
    cols.par_chunks_mut(kk).enumerate().for_each(|(p, row)| {
        let b = p / (g.oh * g.ow);
        let oy = (p / g.ow) % g.oh;
        let ox = p % g.ow;
        for ky in 0..g.k {
            let Some(iy) = g.source(oy, ky, g.h) else { continue };
            for kx in 0..g.k {
                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                let src = ((b * g.h + iy) * g.w + ix) * g.cin;
                let dst = (ky * g.k + kx) * g.cin;
                row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back into image layout.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cin;
    let image = g.h * g.w * g.cin;
    let per_batch = g.oh * g.ow;
    let mut dx = vec![0.0; g.batch * image];
    dx.par_chunks_mut(image).enumerate().for_each(|(b, img)| {
        for q in 0..per_batch {
            let (oy, ox) = (q / g.ow, q % g.ow);
            let row = &cols[(b * per_batch + q) * kk..(b * per_batch + q + 1) * kk];
            for ky in 0..g.k {
                let Some(iy) = g.source(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.source(ox, kx, g.w) else { continue };
                    let dst = (iy * g.w + ix) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        img[dst + c] += row[src + c];
                    }
                }
            }
        }
    });
    dx
}

/// Per-channel convolution with weights `[k, k, C]`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let c = g.cin;
    let mut out = vec![0.0; g.positions() * c];
    out.par_chunks_mut(c).enumerate().for_each(|(p, px)| {
        let b = p / (g.oh * g.ow);
        let oy = (p / g.ow) % g.oh;
        let ox = p % g.ow;
        for ky in 0..g.k {
            let Some(iy) = g.source(oy, ky, g.h) else { continue };
            for kx in 0..g.k {
                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                let src = ((b * g.h + iy) * g.w + ix) * c;
                let wk = (ky * g.k + kx) * c;
                for ch in 0..c {
                    px[ch] += x[src + ch] * w[wk + ch];
                }
            }
        }
    });
    out
}

/// Returns `(dx, dw)` for [`depthwise_forward`].
pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let c = g.cin;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for p in 0..g.positions() {
        let b = p / (g.oh * g.ow);
        let oy = (p / g.ow) % g.oh;
        let ox = p % g.ow;
        let gy = &dy[p * c..(p + 1) * c];
        for ky in 0..g.k {
            let Some(iy) = g.source(oy, ky, g.h) else { continue };
            for kx in 0..g.k {
                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                let src = ((b * g.h + iy) * g.w + ix) * c;
                let wk = (ky * g.k + kx) * c;
                for ch in 0..c {
                    dx[src + ch] += gy[ch] * w[wk + ch];
                    dw[wk + ch] += gy[ch] * x[src + ch];
                }
            }
        }
    }
    (dx, dw)
}

/// Moves axes of a row-major array: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = super::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(224, 3, 2, Padding::Same).unwrap(), 112);
        assert_eq!(conv_output_extent(5, 3, 1, Padding::Valid).unwrap(), 3);
        assert_eq!(conv_output_extent(7, 1, 2, Padding::Valid).unwrap(), 4);
        assert!(matches!(
            conv_output_extent(2, 5, 1, Padding::Valid),
            Err(TensorError::KernelTooLarge { kernel: 5, padded: 2, .. })
        ));
    }

    #[test]
    fn halving_five_times_reaches_seven() {
        let mut h = 224;
        for _ in 0..5 {
            h = conv_output_extent(h, 3, 2, Padding::Same).unwrap();
        }
        assert_eq!(h, 7);
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let c = gemm(&a, &b, 2, 3, 4);
        // aᵀ·c via gemm_tn against explicit transpose
        let at = permute(&a, &[2, 3], &[1, 0]);
        assert_eq!(gemm_tn(&a, &c, 2, 3, 4), gemm(&at, &c, 3, 2, 4));
        let bt = permute(&b, &[3, 4], &[1, 0]);
        let lhs = gemm_nt(&c, &b, 2, 3, 4);
        let rhs = gemm(&c, &bt, 2, 4, 3);
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let out = permute(&data, &shape, &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
    }
}
