use super::tape::Op;
use super::{Element, Result, Tape, Tensor, TensorError, Var};

/// Geometry of one convolution, all sizes per sample.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `lo..hi` whose kernel column `kj` lands inside the input.
    fn valid_columns(&self, kj: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kj).div_ceil(self.stride);
        let reach = self.width - 1 + self.padding;
        let hi = if reach < kj {
            0
        } else {
            ((reach - kj) / self.stride + 1).min(self.out_w)
        };
        (lo, hi.max(lo))
    }
}

fn geometry(
    input: &[usize],
    kernel: &[usize],
    bias: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: input.to_vec(),
        rhs: kernel.to_vec(),
    };
    if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
        return Err(mismatch());
    }
    if bias != [kernel[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: kernel.to_vec(),
            rhs: bias.to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: "stride must be positive".into(),
        });
    }
    let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
    if h < kernel[2] || w < kernel[3] {
        return Err(mismatch());
    }
    Ok(ConvGeometry {
        channels: input[1],
        height: input[2],
        width: input[3],
        kernel_h: kernel[2],
        kernel_w: kernel[3],
        stride,
        padding,
        out_h: (h - kernel[2]) / stride + 1,
        out_w: (w - kernel[3]) / stride + 1,
    })
}

/// Unfolds one sample `[C,H,W]` into columns `[C·kh·kw, out_h·out_w]`.
fn im2col<E: Element>(image: &[E], g: &ConvGeometry, cols: &mut [E]) {
    let out_len = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let (lo, hi) = g.valid_columns(kj);
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih as usize >= g.height || lo >= hi {
                        dst_row.fill(E::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    dst_row[..lo].fill(E::zero());
                    dst_row[hi..].fill(E::zero());
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in dst_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds columns back into an image gradient, accumulating overlaps.
fn col2im<E: Element>(cols: &[E], g: &ConvGeometry, image: &mut [E]) {
    let out_len = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let (lo, hi) = g.valid_columns(kj);
                let src = &cols[row * out_len..(row + 1) * out_len];
                row += 1;
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.padding;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let src_row = &src[oh * g.out_w + lo..oh * g.out_w + hi];
                    for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(src_row) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let g = geometry(input.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    let (n, k) = (input.shape()[0], kernel.shape()[0]);
    let sample_in = g.channels * g.height * g.width;
    let sample_out = k * g.out_len();
    let mut out = vec![E::zero(); n * sample_out];
    E::with_scratch(g.patch_len() * g.out_len(), |cols| {
        for (x, y) in input
            .data()
            .chunks_exact(sample_in)
            .zip(out.chunks_exact_mut(sample_out))
        {
            for (plane, b) in y.chunks_exact_mut(g.out_len()).zip(bias.data()) {
                plane.fill(*b);
            }
            im2col(x, &g, cols);
            E::gemm(
                k,
                g.patch_len(),
                g.out_len(),
                kernel.data(),
                false,
                cols,
                false,
                y,
                true,
            );
        }
    });
    Ok(Tensor::from_parts(vec![n, k, g.out_h, g.out_w], out))
}

pub(super) struct ConvGrads<E> {
    pub input: Option<Vec<E>>,
    pub kernel: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

pub(super) fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &[E],
    stride: usize,
    padding: usize,
    want_input: bool,
    want_params: bool,
) -> ConvGrads<E> {
    let bias_shape = [kernel.shape()[0]];
    let g = geometry(input.shape(), kernel.shape(), &bias_shape, stride, padding)
        .expect("geometry validated in forward");
    let (n, k) = (input.shape()[0], kernel.shape()[0]);
    let sample_in = g.channels * g.height * g.width;
    let sample_out = k * g.out_len();

    let mut d_input = want_input.then(|| vec![E::zero(); input.numel()]);
    let mut d_kernel = want_params.then(|| vec![E::zero(); kernel.numel()]);
    let mut d_bias = want_params.then(|| vec![E::zero(); k]);
    E::with_scratch(g.patch_len() * g.out_len(), |cols| {
        for s in 0..n {
            let x = &input.data()[s * sample_in..(s + 1) * sample_in];
            let dy = &grad_out[s * sample_out..(s + 1) * sample_out];
            if let (Some(dk), Some(db)) = (d_kernel.as_mut(), d_bias.as_mut()) {
                im2col(x, &g, cols);
                // dK += dY · colsᵀ
                E::gemm(k, g.out_len(), g.patch_len(), dy, false, cols, true, dk, true);
                for (b, plane) in db.iter_mut().zip(dy.chunks_exact(g.out_len())) {
                    let sum: f64 = plane.iter().map(|v| v.as_f64()).sum();
                    *b = *b + E::from_f64(sum);
                }
            }
            if let Some(dx) = d_input.as_mut() {
                // dcols = Kᵀ · dY
                E::gemm(
                    g.patch_len(),
                    k,
                    g.out_len(),
                    kernel.data(),
                    true,
                    dy,
                    false,
                    cols,
                    false,
                );
                col2im(cols, &g, &mut dx[s * sample_in..(s + 1) * sample_in]);
            }
        }
    });
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

impl<E: Element> Tape<E> {
    /// 2-D cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]` plus bias `[K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        let needs = self.needs_grad(input) || self.needs_grad(kernel) || self.needs_grad(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }
}
