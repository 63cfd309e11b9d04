//! Batched layer kernels. Activations are stored as a matrix with one row
//! per channel and one column per (sample, y, x) position, sample-major.
//! Fully connected activations use the same layout with `h = w = 1`.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data: DMatrix<f64>,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl Batch {
    /// Packs flat `[c, h, w]` images.
    pub fn from_images(images: &[&[f64]], shape: [usize; 3]) -> Self {
        let [c, h, w] = shape;
        let hw = h * w;
        let mut data = DMatrix::zeros(c, images.len() * hw);
        for (b, img) in images.iter().enumerate() {
            debug_assert_eq!(img.len(), c * hw);
            for ch in 0..c {
                for p in 0..hw {
                    data[(ch, b * hw + p)] = img[ch * hw + p];
                }
            }
        }
        Self {
            data,
            batch: images.len(),
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    /// Sample `b` as a flat `[c, h, w]` vector.
    pub fn sample(&self, b: usize) -> Vec<f64> {
        let hw = self.h * self.w;
        let mut out = Vec::with_capacity(self.channels() * hw);
        for ch in 0..self.channels() {
            out.extend((0..hw).map(|p| self.data[(ch, b * hw + p)]));
        }
        out
    }

    /// `(c·h·w) × batch`, feature index `ch·hw + p`.
    fn flatten(&self) -> DMatrix<f64> {
        let hw = self.h * self.w;
        if hw == 1 {
            return self.data.clone();
        }
        DMatrix::from_fn(self.channels() * hw, self.batch, |f, b| {
            self.data[(f / hw, b * hw + f % hw)]
        })
    }

    fn unflatten(m: &DMatrix<f64>, channels: usize, h: usize, w: usize) -> Self {
        let hw = h * w;
        let batch = m.ncols();
        let data = DMatrix::from_fn(channels, batch * hw, |ch, col| {
            m[(ch * hw + col % hw, col / hw)]
        });
        Self { data, batch, h, w }
    }
}

/// Square-kernel convolution with zero "same" padding of `kernel / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub id: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out × (in·k·k)`, column index `ci·k² + ky·k + kx`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Conv {
    pub fn output_dim(&self, d: usize) -> usize {
        let pad = self.kernel / 2;
        (d + 2 * pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Batch) -> DMatrix<f64> {
        let (k, s, pad) = (self.kernel, self.stride, (self.kernel / 2) as isize);
        let (ho, wo) = (self.output_dim(x.h), self.output_dim(x.w));
        let (hw_in, hw_out) = (x.h * x.w, ho * wo);
        let mut cols = DMatrix::zeros(self.in_channels * k * k, x.batch * hw_out);
        for b in 0..x.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let col = b * hw_out + oy * wo + ox;
                    let mut column = cols.column_mut(col);
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let src = b * hw_in + iy as usize * x.w + ix as usize;
                            for ci in 0..self.in_channels {
                                column[ci * k * k + ky * k + kx] = x.data[(ci, src)];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &DMatrix<f64>, batch: usize, h: usize, w: usize) -> DMatrix<f64> {
        let (k, s, pad) = (self.kernel, self.stride, (self.kernel / 2) as isize);
        let (ho, wo) = (self.output_dim(h), self.output_dim(w));
        let (hw_in, hw_out) = (h * w, ho * wo);
        let mut dx = DMatrix::zeros(self.in_channels, batch * hw_in);
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let column = cols.column(b * hw_out + oy * wo + ox);
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = b * hw_in + iy as usize * w + ix as usize;
                            for ci in 0..self.in_channels {
                                dx[(ci, dst)] += column[ci * k * k + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the unfolded input kept for the backward pass.
    pub fn forward(&self, x: &Batch) -> (Batch, DMatrix<f64>) {
        let cols = self.im2col(x);
        let mut y = &self.weight * &cols;
        for (mut row, b) in y.row_iter_mut().zip(self.bias.iter()) {
            row.add_scalar_mut(*b);
        }
        let out = Batch {
            data: y,
            batch: x.batch,
            h: self.output_dim(x.h),
            w: self.output_dim(x.w),
        };
        (out, cols)
    }

    /// Gradients for weight, bias and input.
    pub fn backward(
        &self,
        cols: &DMatrix<f64>,
        dy: &Batch,
        in_h: usize,
        in_w: usize,
    ) -> (DMatrix<f64>, DVector<f64>, Batch) {
        let dw = &dy.data * cols.transpose();
        let db = dy.data.column_sum();
        let dcols = self.weight.transpose() * &dy.data;
        let dx = Batch {
            data: self.col2im(&dcols, dy.batch, in_h, in_w),
            batch: dy.batch,
            h: in_h,
            w: in_w,
        };
        (dw, db, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fc {
    pub id: String,
    pub in_features: usize,
    pub out_features: usize,
    /// `out × in`; a flattened conv input has feature index `ch·h·w + y·w + x`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Fc {
    pub fn forward(&self, x: &Batch) -> (Batch, DMatrix<f64>) {
        let flat = x.flatten();
        let mut y = &self.weight * &flat;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        (
            Batch {
                data: y,
                batch: x.batch,
                h: 1,
                w: 1,
            },
            flat,
        )
    }

    pub fn backward(
        &self,
        flat: &DMatrix<f64>,
        dy: &Batch,
        in_shape: [usize; 3],
    ) -> (DMatrix<f64>, DVector<f64>, Batch) {
        let dw = &dy.data * flat.transpose();
        let db = dy.data.column_sum();
        let dflat = self.weight.transpose() * &dy.data;
        let [c, h, w] = in_shape;
        (dw, db, Batch::unflatten(&dflat, c, h, w))
    }
}

pub fn relu(x: &Batch) -> Batch {
    Batch {
        data: x.data.map(|v| v.max(0.0)),
        ..*x
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Batch, dy: &Batch) -> Batch {
    Batch {
        data: dy
            .data
            .zip_map(&out.data, |g, o| if o > 0.0 { g } else { 0.0 }),
        ..*dy
    }
}

/// 2×2 max pooling with stride 2; also returns the winning input column per output.
pub fn maxpool(x: &Batch) -> (Batch, Vec<usize>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let (hw_in, hw_out) = (x.h * x.w, ho * wo);
    let c = x.channels();
    let mut out = DMatrix::zeros(c, x.batch * hw_out);
    let mut arg = vec![0; c * x.batch * hw_out];
    for b in 0..x.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let col = b * hw_out + oy * wo + ox;
                let base = b * hw_in + 2 * oy * x.w + 2 * ox;
                let cands = [base, base + 1, base + x.w, base + x.w + 1];
                for ch in 0..c {
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if x.data[(ch, cand)] > x.data[(ch, best)] {
                            best = cand;
                        }
                    }
                    out[(ch, col)] = x.data[(ch, best)];
                    arg[col * c + ch] = best;
                }
            }
        }
    }
    let y = Batch {
        data: out,
        batch: x.batch,
        h: ho,
        w: wo,
    };
    (y, arg)
}

pub fn maxpool_backward(arg: &[usize], dy: &Batch, in_h: usize, in_w: usize) -> Batch {
    let c = dy.channels();
    let mut dx = DMatrix::zeros(c, dy.batch * in_h * in_w);
    for col in 0..dy.data.ncols() {
        for ch in 0..c {
            dx[(ch, arg[col * c + ch])] += dy.data[(ch, col)];
        }
    }
    Batch {
        data: dx,
        batch: dy.batch,
        h: in_h,
        w: in_w,
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Batch, labels: &[usize]) -> (f64, Batch) {
    let n = labels.len() as f64;
    let mut grad = logits.data.clone();
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let mut col = grad.column_mut(b);
        let max = col.max();
        let shifted_label = col[label] - max;
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        loss += sum.ln() - shifted_label;
        col /= sum;
        col[label] -= 1.0;
        col /= n;
    }
    (
        loss / n,
        Batch {
            data: grad,
            ..*logits
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(in_c: usize, out_c: usize, k: usize, stride: usize) -> Conv {
        Conv {
            id: "c".into(),
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            stride,
            weight: DMatrix::from_fn(out_c, in_c * k * k, |i, j| {
                ((i * 7 + j * 3) % 5) as f64 - 2.0
            }),
            bias: DVector::from_fn(out_c, |i, _| i as f64 * 0.5),
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(c: &Conv, img: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (k, pad) = (c.kernel as isize, (c.kernel / 2) as isize);
        let (ho, wo) = (c.output_dim(h), c.output_dim(w));
        let mut out = vec![0.0; c.out_channels * ho * wo];
        for co in 0..c.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = c.bias[co];
                    for ci in 0..c.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * c.stride) as isize + ky - pad;
                                let ix = (ox * c.stride) as isize + kx - pad;
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    let wi = ci * (k * k) as usize + (ky * k + kx) as usize;
                                    acc += c.weight[(co, wi)]
                                        * img[ci * h * w + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[co * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for stride in [1, 2] {
            let c = conv(2, 3, 3, stride);
            let imgs: Vec<Vec<f64>> = (0..2)
                .map(|s| {
                    (0..2 * 5 * 6)
                        .map(|i| ((i * 13 + s * 5) % 11) as f64 * 0.1)
                        .collect()
                })
                .collect();
            let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
            let x = Batch::from_images(&refs, [2, 5, 6]);
            let (y, _) = c.forward(&x);
            for (b, img) in imgs.iter().enumerate() {
                let want = naive_conv(&c, img, 5, 6);
                let got = y.sample(b);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn flatten_roundtrip_and_order() {
        let img: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64).collect();
        let x = Batch::from_images(&[&img, &img], [2, 2, 3]);
        let flat = x.flatten();
        assert_eq!(flat.column(1).as_slice(), img.as_slice());
        assert_eq!(Batch::unflatten(&flat, 2, 2, 3), x);
    }

    #[test]
    fn maxpool_picks_maximum() {
        let img = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0];
        let x = Batch::from_images(&[&img], [1, 2, 4]);
        let (y, arg) = maxpool(&x);
        assert_eq!(y.data.as_slice(), &[5.0, 9.0]);
        let dx = maxpool_backward(
            &arg,
            &Batch {
                data: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
                ..y
            },
            2,
            4,
        );
        assert_eq!(
            dx.data.as_slice(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]
        );
    }

    #[test]
    fn softmax_loss_of_uniform_logits() {
        let logits = Batch {
            data: DMatrix::zeros(4, 2),
            batch: 2,
            h: 1,
            w: 1,
        };
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.data[(0, 0)] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(grad.data.column(1).sum().abs() < 1e-12);
    }
}
