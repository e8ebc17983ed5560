//! Channel-major `(C, H, W)` tensors and the layer kernels of the built-in
//! backbone. Convolutions are lowered to GEMM through im2col.

/// Dense `(channels, height, width)` tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }
}

/// `C = A·B` (or `C += A·B` when `accumulate`), row/column strides given
/// explicitly so transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is `i*rs + j*cs` for `i < rows`, `j < cols`
    // of the respective operand, which the callers size accordingly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// im2col for a 3×3 kernel with zero padding 1: row `ci*9 + ky*3 + kx`,
/// column `y*W + x`.
fn im2col3(input: &Tensor) -> Vec<f32> {
    let (h, w) = (input.height, input.width);
    let n = h * w;
    let mut cols = vec![0.0f32; input.channels * 9 * n];
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                let y0 = 1usize.saturating_sub(ky);
                let y1 = (h + 1 - ky).min(h);
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let dst = &mut row[y * w + x0..y * w + x1];
                    let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    dst.copy_from_slice(s);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
fn col2im3(cols: &[f32], channels: usize, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut out = Tensor::zeros(channels, h, w);
    for ci in 0..channels {
        let dst = &mut out.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                let y0 = 1usize.saturating_sub(ky);
                let y1 = (h + 1 - ky).min(h);
                let x0 = 1usize.saturating_sub(kx);
                let x1 = (w + 1 - kx).min(w);
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let d = &mut dst[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    for (d, s) in d.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// 3×3 same-padding convolution. `weight` is `(out, in*9)` row-major.
/// Returns the output and the im2col buffer needed by the backward pass.
pub fn conv3x3(input: &Tensor, weight: &[f32], bias: &[f32], out_channels: usize) -> (Tensor, Vec<f32>) {
    let k = input.channels * 9;
    debug_assert_eq!(weight.len(), out_channels * k);
    let n = input.plane();
    let cols = im2col3(input);
    let mut out = Tensor::zeros(out_channels, input.height, input.width);
    gemm(out_channels, k, n, weight, (k, 1), &cols, (n, 1), &mut out.data, false);
    for (o, &b) in bias.iter().enumerate() {
        out.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
    }
    (out, cols)
}

/// Backward pass of [`conv3x3`]: accumulates into `grad_weight`/`grad_bias`
/// and returns the gradient w.r.t. the input when `input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    cols: &[f32],
    in_channels: usize,
    weight: &[f32],
    grad_out: &Tensor,
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
    input_grad: bool,
) -> Option<Tensor> {
    let k = in_channels * 9;
    let n = grad_out.plane();
    let out_channels = grad_out.channels;
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.channel(o).iter().sum::<f32>();
    }
    gemm(out_channels, n, k, &grad_out.data, (n, 1), cols, (1, n), grad_weight, true);
    if !input_grad {
        return None;
    }
    let mut grad_cols = vec![0.0f32; k * n];
    gemm(k, out_channels, n, weight, (1, k), &grad_out.data, (n, 1), &mut grad_cols, false);
    Some(col2im3(&grad_cols, in_channels, grad_out.height, grad_out.width))
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling over even-sized inputs; also returns the flat argmax of
/// each output cell.
pub fn maxpool2(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor::zeros(input.channels, h, w);
    let mut arg = vec![0u32; out.data.len()];
    for c in 0..input.channels {
        let src = input.channel(c);
        let base = c * input.plane();
        for y in 0..h {
            for x in 0..w {
                let mut best = (2 * y) * input.width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy) * input.width + 2 * x + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = c * h * w + y * w + x;
                out.data[o] = src[best];
                arg[o] = (base + best) as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &Tensor, argmax: &[u32], channels: usize, h: usize, w: usize) -> Tensor {
    let mut g = Tensor::zeros(channels, h, w);
    for (&gv, &i) in grad_out.data.iter().zip(argmax) {
        g.data[i as usize] += gv;
    }
    g
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2(input: &Tensor) -> Tensor {
    let (h, w) = (input.height * 2, input.width * 2);
    let mut out = Tensor::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * input.width + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut g = Tensor::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = &mut g.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                dst[(y / 2) * w + x / 2] += src[y * grad_out.width + x];
            }
        }
    }
    g
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.channels + b.channels, a.height, a.width, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let n = first * t.plane();
    (
        Tensor::from_vec(first, t.height, t.width, t.data[..n].to_vec()),
        Tensor::from_vec(t.channels - first, t.height, t.width, t.data[n..].to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct 3×3 convolution used as an oracle for the GEMM path.
    fn naive_conv(input: &Tensor, weight: &[f32], bias: &[f32], out_c: usize) -> Tensor {
        let (h, w) = (input.height, input.width);
        let mut out = Tensor::zeros(out_c, h, w);
        for o in 0..out_c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[o] as f64;
                    for ci in 0..input.channels {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = weight[o * input.channels * 9 + ci * 9 + (ky * 3 + kx) as usize];
                                acc += wv as f64 * input.data[ci * h * w + sy as usize * w + sx as usize] as f64;
                            }
                        }
                    }
                    out.data[o * h * w + y as usize * w + x as usize] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(3, 5, 7, &mut rng);
        let weight: Vec<f32> = (0..4 * 27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (fast, _) = conv3x3(&input, &weight, &bias, 4);
        let slow = naive_conv(&input, &weight, &bias, 4);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(2, 4, 6, &mut rng);
        let cols = im2col3(&x);
        let y: Vec<f32> = (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im3(&y, 2, 4, 6);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random(2, 4, 4, &mut rng);
        let weight: Vec<f32> = (0..3 * 18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.1f32, -0.2, 0.3];
        let probe = random(3, 4, 4, &mut rng);
        // L = <conv(x), probe>
        let loss = |x: &Tensor, w: &[f32]| -> f64 {
            let (y, _) = conv3x3(x, w, &bias, 3);
            y.data.iter().zip(&probe.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cols) = conv3x3(&input, &weight, &bias, 3);
        let mut gw = vec![0.0f32; weight.len()];
        let mut gb = vec![0.0f32; 3];
        let gx = conv3x3_backward(&cols, 2, &weight, &probe, &mut gw, &mut gb, true).unwrap();
        let h = 1e-2f32;
        for i in [0usize, 7, 20, 53] {
            let mut wp = weight.clone();
            wp[i] += h;
            let mut wm = weight.clone();
            wm[i] -= h;
            let fd = (loss(&input, &wp) - loss(&input, &wm)) / (2.0 * h as f64);
            assert!((fd - gw[i] as f64).abs() < 1e-3, "weight {i}: {fd} vs {}", gw[i]);
        }
        for i in [0usize, 5, 17, 31] {
            let mut xp = input.clone();
            xp.data[i] += h;
            let mut xm = input.clone();
            xm.data[i] -= h;
            let fd = (loss(&xp, &weight) - loss(&xm, &weight)) / (2.0 * h as f64);
            assert!((fd - gx.data[i] as f64).abs() < 1e-3, "input {i}");
        }
        let probe_sum: f32 = probe.channel(1).iter().sum();
        assert!((gb[1] - probe_sum).abs() < 1e-5);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(2, 4, 4, &mut rng);
        let (p, arg) = maxpool2(&x);
        assert_eq!((p.height, p.width), (2, 2));
        let g = Tensor::from_vec(2, 2, 2, vec![1.0; 8]);
        let back = maxpool2_backward(&g, &arg, 2, 4, 4);
        assert_eq!(back.data.iter().filter(|&&v| v == 1.0).count(), 8);
        for (i, &a) in arg.iter().enumerate() {
            assert_eq!(x.data[a as usize], p.data[i]);
        }
        let u = upsample2(&p);
        let ub = upsample2_backward(&Tensor::from_vec(2, 4, 4, vec![1.0; 32]));
        assert_eq!(u.data.len(), 32);
        assert!(ub.data.iter().all(|&v| v == 4.0));
    }
}
