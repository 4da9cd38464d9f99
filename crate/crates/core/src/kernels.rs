//! Raw convolution kernels over row-major `f64` slices.
//!
//! Batched entry points split work per image; per-image weight gradients are
//! summed in image order so results do not depend on the thread count.

use rayon::prelude::*;

/// `c = a · b` (+ `c` when `accumulate`), with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides and extents describe in-bounds views of the given
    // slices; callers pass buffers sized m×k, k×n and m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin*9, h*w]` patch columns
/// (padding 1, stride 1).
pub fn im2col_3x3(input: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_3x3`]: folds patch-column gradients back into an image.
pub fn col2im_3x3(cols: &[f64], cin: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    out[..cin * hw].fill(0.0);
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a batched convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    /// 1 or 3
    pub kernel: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

pub fn conv_forward(d: ConvDims, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = d.hw();
    let mut out = vec![0.0; d.batch * d.cout * hw];
    out.par_chunks_mut(d.cout * hw)
        .enumerate()
        .for_each(|(b, dst)| {
            let img = &input[b * d.cin * hw..(b + 1) * d.cin * hw];
            for (co, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(bias[co]);
            }
            let k = d.patch();
            if d.kernel == 3 {
                let mut cols = vec![0.0; k * hw];
                im2col_3x3(img, d.cin, d.height, d.width, &mut cols);
                gemm(d.cout, k, hw, weight, (k as isize, 1), &cols, (hw as isize, 1), dst, true);
            } else {
                gemm(d.cout, k, hw, weight, (k as isize, 1), img, (hw as isize, 1), dst, true);
            }
        });
    out
}

/// Gradients of a batched convolution. `grad_input` is `None` when the input
/// does not require a gradient.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_backward(
    d: ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let hw = d.hw();
    let k = d.patch();
    type ImageGrads = (Vec<f64>, Vec<f64>, Option<Vec<f64>>);
    let per_image: Vec<ImageGrads> = (0..d.batch)
        .into_par_iter()
        .map(|b| {
            let img = &input[b * d.cin * hw..(b + 1) * d.cin * hw];
            let go = &grad_out[b * d.cout * hw..(b + 1) * d.cout * hw];
            let mut gb = vec![0.0; d.cout];
            for (co, row) in go.chunks(hw).enumerate() {
                let mut acc = 0.0;
                for &v in row {
                    acc += v;
                }
                gb[co] = acc;
            }
            let mut gw = vec![0.0; d.cout * k];
            let cols_owned;
            let cols: &[f64] = if d.kernel == 3 {
                let mut c = vec![0.0; k * hw];
                im2col_3x3(img, d.cin, d.height, d.width, &mut c);
                cols_owned = c;
                &cols_owned
            } else {
                img
            };
            // dW = dOut · colsᵀ
            gemm(d.cout, hw, k, go, (hw as isize, 1), cols, (1, hw as isize), &mut gw, false);
            let gi = need_input.then(|| {
                // dCols = Wᵀ · dOut
                let mut dcols = vec![0.0; k * hw];
                gemm(k, d.cout, hw, weight, (1, k as isize), go, (hw as isize, 1), &mut dcols, false);
                if d.kernel == 3 {
                    let mut gi = vec![0.0; d.cin * hw];
                    col2im_3x3(&dcols, d.cin, d.height, d.width, &mut gi);
                    gi
                } else {
                    dcols
                }
            });
            (gw, gb, gi)
        })
        .collect();

    let mut weight_grad = vec![0.0; d.cout * k];
    let mut bias_grad = vec![0.0; d.cout];
    let mut input_grad = need_input.then(|| Vec::with_capacity(d.batch * d.cin * hw));
    for (gw, gb, gi) in per_image {
        for (a, v) in weight_grad.iter_mut().zip(&gw) {
            *a += v;
        }
        for (a, v) in bias_grad.iter_mut().zip(&gb) {
            *a += v;
        }
        if let (Some(all), Some(gi)) = (input_grad.as_mut(), gi) {
            all.extend_from_slice(&gi);
        }
    }
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
