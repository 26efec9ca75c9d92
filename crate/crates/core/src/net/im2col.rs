//! Patch-to-column rearrangement for 2-D convolutions.
//!
//! Row `c·k² + ky·k + kx` of the im2col matrix holds channel `c` at kernel
//! offset `(ky, kx)`; column `oy·out_w + ox` is the receptive field of output
//! location `(oy, ox)`. Padding reads as zero.

use super::layer::ConvGeometry;
use crate::error::{shape_err, Result};
use crate::matrix::Matrix;

/// Unfolds one sample. `input` is `channels x (height·width)`.
pub fn im2col(input: &Matrix, geom: &ConvGeometry) -> Result<Matrix> {
    geom.validate()?;
    if input.shape() != (geom.in_channels, geom.in_height * geom.in_width) {
        return shape_err(format!(
            "im2col: expected {}x{} input, got {}x{}",
            geom.in_channels,
            geom.in_height * geom.in_width,
            input.rows(),
            input.cols()
        ));
    }
    let mut out = Matrix::zeros(geom.patch_len(), geom.locations());
    im2col_into(input.as_slice(), geom, out.as_mut_slice());
    Ok(out)
}

/// Writes the `patch_len x locations` unfolding of one channel-fastest
/// sample into `out` (column-major, leading dimension `patch_len`).
pub(crate) fn im2col_into(sample: &[f64], geom: &ConvGeometry, out: &mut [f64]) {
    let k = geom.kernel;
    let c_in = geom.in_channels;
    let (h, w) = (geom.in_height as isize, geom.in_width as isize);
    let rows = geom.patch_len();
    let out_w = geom.out_width();
    for oy in 0..geom.out_height() {
        for ox in 0..out_w {
            let col = &mut out[(oy * out_w + ox) * rows..(oy * out_w + ox + 1) * rows];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    let inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
                    let base = if inside { (iy * w + ix) as usize * c_in } else { 0 };
                    for c in 0..c_in {
                        col[c * k * k + ky * k + kx] = if inside { sample[base + c] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: accumulates column gradients back onto the
/// channel-fastest input gradient `grad` (which must be zeroed by the caller).
pub(crate) fn col2im_add(cols: &[f64], geom: &ConvGeometry, grad: &mut [f64]) {
    let k = geom.kernel;
    let c_in = geom.in_channels;
    let (h, w) = (geom.in_height as isize, geom.in_width as isize);
    let rows = geom.patch_len();
    let out_w = geom.out_width();
    for oy in 0..geom.out_height() {
        for ox in 0..out_w {
            let col = &cols[(oy * out_w + ox) * rows..(oy * out_w + ox + 1) * rows];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let base = (iy * w + ix) as usize * c_in;
                    for c in 0..c_in {
                        grad[base + c] += col[c * k * k + ky * k + kx];
                    }
                }
            }
        }
    }
}
