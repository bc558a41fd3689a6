//! Feature maps, im2col lowering and pooling.

use crate::error::{KanError, Result};
use crate::linalg::Matrix;

/// Channel-major `[C, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(KanError::ShapeMismatch(format!(
                "{} values cannot fill a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds `[C, H, W]` from a `[H*W, C]` matrix (one row per position).
    pub fn from_positions_major(m: &Matrix, height: usize, width: usize) -> Self {
        let channels = m.cols();
        let positions = height * width;
        debug_assert_eq!(m.rows(), positions);
        let mut data = vec![0.0; channels * positions];
        for p in 0..positions {
            for (c, &v) in m.row(p).iter().enumerate() {
                data[c * positions + p] = v;
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }
}

pub fn conv_output_dims(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    let dim = |n: usize| -> Result<usize> {
        let padded = n + 2 * padding;
        if stride == 0 || kernel == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
            return Err(KanError::InvalidArgument(format!(
                "kernel {kernel}, stride {stride}, padding {padding} do not tile an input of size {n}"
            )));
        }
        Ok((padded - kernel) / stride + 1)
    };
    Ok((dim(h)?, dim(w)?))
}

/// Unfolds `input` into a `[H_out*W_out, K²·C]` matrix. Row `r` holds the
/// patch at output position `r` (row-major over the output grid); within a
/// row elements are ordered by channel, kernel row, kernel column. Positions
/// outside the input read as zero.
pub fn im2col(input: &FeatureMap, kernel: usize, stride: usize, padding: usize) -> Result<Matrix> {
    let (h_out, w_out) = conv_output_dims(input.height, input.width, kernel, stride, padding)?;
    let patch = kernel * kernel * input.channels;
    let mut out = Matrix::zeros(h_out * w_out, patch);
    for oy in 0..h_out {
        for ox in 0..w_out {
            let row = out.row_mut(oy * w_out + ox);
            let mut e = 0;
            for c in 0..input.channels {
                for ky in 0..kernel {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    for kx in 0..kernel {
                        let x = (ox * stride + kx) as isize - padding as isize;
                        if y >= 0 && x >= 0 && (y as usize) < input.height && (x as usize) < input.width {
                            row[e] = input.at(c, y as usize, x as usize);
                        }
                        e += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(
    cols: &Matrix,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap> {
    let (h_out, w_out) = conv_output_dims(height, width, kernel, stride, padding)?;
    if cols.shape() != (h_out * w_out, kernel * kernel * channels) {
        return Err(KanError::ShapeMismatch(format!(
            "col2im expects {}x{}, got {}x{}",
            h_out * w_out,
            kernel * kernel * channels,
            cols.rows(),
            cols.cols()
        )));
    }
    let mut out = FeatureMap::zeros(channels, height, width);
    for oy in 0..h_out {
        for ox in 0..w_out {
            let row = cols.row(oy * w_out + ox);
            let mut e = 0;
            for c in 0..channels {
                for ky in 0..kernel {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    for kx in 0..kernel {
                        let x = (ox * stride + kx) as isize - padding as isize;
                        if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                            out.data[(c * height + y as usize) * width + x as usize] += row[e];
                        }
                        e += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping `window x window` max pooling. Trailing rows/columns that
/// do not fill a window are dropped.
pub fn max_pool(input: &FeatureMap, window: usize) -> Result<FeatureMap> {
    Ok(max_pool_with_indices(input, window)?.0)
}

/// Max pooling that also returns, for every output element, the flat index
/// of the input element it came from.
pub fn max_pool_with_indices(input: &FeatureMap, window: usize) -> Result<(FeatureMap, Vec<usize>)> {
    if window == 0 || input.height < window || input.width < window {
        return Err(KanError::ShapeMismatch(format!(
            "cannot pool a {}x{} map with window {window}",
            input.height, input.width
        )));
    }
    let (h, w) = (input.height / window, input.width / window);
    let mut out = FeatureMap::zeros(input.channels, h, w);
    let mut idx = vec![0; input.channels * h * w];
    for c in 0..input.channels {
        for oy in 0..h {
            for ox in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = (c * input.height + oy * window + ky) * input.width + ox * window + kx;
                        if input.data[i] > best {
                            best = input.data[i];
                            best_i = i;
                        }
                    }
                }
                let o = (c * h + oy) * w + ox;
                out.data[o] = best;
                idx[o] = best_i;
            }
        }
    }
    Ok((out, idx))
}

/// 2x2, stride-2 max pooling.
pub fn maxpool2x2(input: &FeatureMap) -> Result<FeatureMap> {
    max_pool(input, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_identity_patching() {
        let fm = FeatureMap::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let cols = im2col(&fm, 1, 1, 0).unwrap();
        assert_eq!(cols.shape(), (4, 2));
        assert_eq!(cols.row(0), &[1.0, 5.0]);
        assert_eq!(cols.row(3), &[4.0, 8.0]);
        assert_eq!(cols.transpose().as_slice(), fm.data());
    }

    #[test]
    fn im2col_hand_enumeration() {
        let fm = FeatureMap::new(1, 3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let cols = im2col(&fm, 2, 1, 0).unwrap();
        let expected = [
            [1.0, 2.0, 4.0, 5.0],
            [2.0, 3.0, 5.0, 6.0],
            [4.0, 5.0, 7.0, 8.0],
            [5.0, 6.0, 8.0, 9.0],
        ];
        for (r, e) in expected.iter().enumerate() {
            assert_eq!(cols.row(r), e);
        }
    }

    #[test]
    fn im2col_padding() {
        let fm = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&fm, 3, 1, 1).unwrap();
        assert_eq!(cols.shape(), (4, 9));
        for r in 0..4 {
            let row = cols.row(r);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 5);
            let mut nz: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            nz.sort_by(f64::total_cmp);
            assert_eq!(nz, vec![1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn invalid_tiling() {
        let fm = FeatureMap::zeros(1, 4, 4);
        assert!(matches!(im2col(&fm, 5, 1, 0), Err(KanError::InvalidArgument(_))));
        assert!(im2col(&fm, 2, 3, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = FeatureMap::new(2, 4, 5, (0..40).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let cols = im2col(&x, 3, 1, 1).unwrap();
        let y = Matrix::from_vec(
            cols.rows(),
            cols.cols(),
            (0..cols.rows() * cols.cols()).map(|v| (v as f64 * 0.11).cos()).collect(),
        )
        .unwrap();
        let lhs: f64 = cols.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 2, 4, 5, 3, 1, 1).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling() {
        let fm = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2x2(&fm).unwrap();
        assert_eq!((p.height(), p.width()), (1, 1));
        assert_eq!(p.data(), &[4.0]);

        let c = FeatureMap::new(3, 4, 6, vec![0.25; 72]).unwrap();
        let p = maxpool2x2(&c).unwrap();
        assert_eq!((p.channels(), p.height(), p.width()), (3, 2, 3));
        assert!(p.data().iter().all(|&v| v == 0.25));

        let small = FeatureMap::zeros(1, 1, 4);
        assert!(matches!(maxpool2x2(&small), Err(KanError::ShapeMismatch(_))));
    }

    #[test]
    fn flatten_keeps_count() {
        let fm = FeatureMap::new(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(fm.flatten().len(), 8);
        assert_eq!(fm.flatten(), (0..8).map(f64::from).collect::<Vec<_>>());
    }
}
