//! The built-in three-level encoder-decoder backbone.

use std::any::Any;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{self, Tensor};
use super::{Backbone, ParamSpec};
use crate::error::{Error, Result};

pub const MINI_UNET: &str = "mini_unet";

#[derive(Debug, Clone, Copy)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    weight: usize,
    bias: usize,
}

impl Conv {
    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * 9
    }
}

/// Three-level U-Net with two 3×3 conv + ReLU blocks per level, max-pool
/// downsampling and nearest-neighbor upsampling with skip concatenation.
/// The features are the ReLU output of the last decoder block, so
/// `feature_dim` equals the first level's width.
#[derive(Debug, Clone)]
pub struct MiniUnet {
    widths: [usize; 3],
    convs: Vec<Conv>,
    names: Vec<&'static str>,
    params: Vec<f32>,
}

const LAYER_NAMES: [&str; 10] = [
    "enc1a", "enc1b", "enc2a", "enc2b", "enc3a", "enc3b", "dec2a", "dec2b", "dec1a", "dec1b",
];

impl MiniUnet {
    /// Default widths `(16, 32, 64)`: 16 features per pixel, about 117k
    /// parameters.
    pub fn new(seed: u64) -> Self {
        Self::with_widths([16, 32, 64], seed)
    }

    /// He-normal initialization from `seed`.
    pub fn with_widths(widths: [usize; 3], seed: u64) -> Self {
        let [w1, w2, w3] = widths;
        let shapes = [
            (1, w1),
            (w1, w1),
            (w1, w2),
            (w2, w2),
            (w2, w3),
            (w3, w3),
            (w3 + w2, w2),
            (w2, w2),
            (w2 + w1, w1),
            (w1, w1),
        ];
        let mut convs = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (in_ch, out_ch) in shapes {
            let weight = offset;
            let bias = weight + out_ch * in_ch * 9;
            offset = bias + out_ch;
            convs.push(Conv {
                in_ch,
                out_ch,
                weight,
                bias,
            });
        }
        let mut params = vec![0.0f32; offset];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &convs {
            let std = (2.0 / (conv.in_ch * 9) as f32).sqrt();
            let normal = Normal::new(0.0f32, std).expect("finite std");
            for p in &mut params[conv.weight..conv.weight + conv.weight_len()] {
                *p = normal.sample(&mut rng);
            }
        }
        Self {
            widths,
            convs,
            names: LAYER_NAMES.to_vec(),
            params,
        }
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    /// Parses the `widths=a,b,c` architecture string written to checkpoints.
    pub fn from_architecture(arch: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("bad mini_unet architecture `{arch}`"));
        let list = arch.strip_prefix("widths=").ok_or_else(bad)?;
        let widths: Vec<usize> = list
            .split(',')
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let widths: [usize; 3] = widths.try_into().map_err(|_| bad())?;
        if widths.contains(&0) {
            return Err(bad());
        }
        Ok(Self::with_widths(widths, 0))
    }

    fn conv(&self, i: usize, x: &Tensor) -> (Tensor, Vec<f32>) {
        let c = self.convs[i];
        let (mut y, cols) = tensor::conv3x3(
            x,
            &self.params[c.weight..c.weight + c.weight_len()],
            &self.params[c.bias..c.bias + c.out_ch],
            c.out_ch,
        );
        tensor::relu_inplace(&mut y);
        (y, cols)
    }

    fn run(&self, input: &Tensor, keep: bool) -> (Tensor, Option<Tape>) {
        assert_eq!(input.channels, 1, "mini_unet expects one input channel");
        let mut tape = Tape::default();
        let mut step = |i: usize, x: &Tensor| -> Tensor {
            let (y, cols) = self.conv(i, x);
            if keep {
                tape.cols[i] = cols;
                tape.outputs[i] = Some(y.clone());
            }
            y
        };
        let x = centered(input);
        let e1 = step(0, &x);
        let s1 = step(1, &e1);
        let (p1, a1) = tensor::maxpool2(&s1);
        let e2 = step(2, &p1);
        let s2 = step(3, &e2);
        let (p2, a2) = tensor::maxpool2(&s2);
        let e3 = step(4, &p2);
        let b = step(5, &e3);
        let u2 = tensor::concat(&tensor::upsample2(&b), &s2);
        let d2 = step(6, &u2);
        let d2 = step(7, &d2);
        let u1 = tensor::concat(&tensor::upsample2(&d2), &s1);
        let d1 = step(8, &u1);
        let features = step(9, &d1);
        if keep {
            tape.argmax = [a1, a2];
            tape.dims = [(s1.height, s1.width), (s2.height, s2.width)];
            (features, Some(tape))
        } else {
            (features, None)
        }
    }

    fn conv_backward(&self, i: usize, tape: &Tape, mut grad: Tensor, grads: &mut [f32], input_grad: bool) -> Option<Tensor> {
        let c = self.convs[i];
        tensor::relu_backward(tape.outputs[i].as_ref().expect("tape output"), &mut grad);
        let (gw, rest) = grads[c.weight..].split_at_mut(c.weight_len());
        tensor::conv3x3_backward(
            &tape.cols[i],
            c.in_ch,
            &self.params[c.weight..c.weight + c.weight_len()],
            &grad,
            gw,
            &mut rest[..c.out_ch],
            input_grad,
        )
    }
}

/// Maps `[0, 1]` intensities to `[-1, 1]`.
fn centered(input: &Tensor) -> Tensor {
    let mut x = input.clone();
    x.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    x
}

#[derive(Default)]
struct Tape {
    cols: [Vec<f32>; 10],
    outputs: [Option<Tensor>; 10],
    argmax: [Vec<u32>; 2],
    dims: [(usize, usize); 2],
}

impl Backbone for MiniUnet {
    fn kind(&self) -> &str {
        MINI_UNET
    }

    fn architecture(&self) -> String {
        let [a, b, c] = self.widths;
        format!("widths={a},{b},{c}")
    }

    fn feature_dim(&self) -> usize {
        self.widths[0]
    }

    fn stride(&self) -> usize {
        4
    }

    fn params(&self) -> &[f32] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn param_table(&self) -> Vec<ParamSpec> {
        self.convs
            .iter()
            .zip(&self.names)
            .flat_map(|(c, name)| {
                [
                    ParamSpec {
                        name: format!("{name}.weight"),
                        offset: c.weight,
                        len: c.weight_len(),
                    },
                    ParamSpec {
                        name: format!("{name}.bias"),
                        offset: c.bias,
                        len: c.out_ch,
                    },
                ]
            })
            .collect()
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        self.run(input, false).0
    }

    fn forward_train(&self, input: &Tensor) -> (Tensor, Box<dyn Any + Send>) {
        let (features, tape) = self.run(input, true);
        (features, Box::new(tape.expect("tape")))
    }

    fn backward(&self, tape: Box<dyn Any + Send>, grad_features: &Tensor, grads: &mut [f32]) {
        let tape = tape.downcast::<Tape>().expect("mini_unet tape");
        let [w1, w2, _] = self.widths;
        let g = self.conv_backward(9, &tape, grad_features.clone(), grads, true).unwrap();
        let g = self.conv_backward(8, &tape, g, grads, true).unwrap();
        let (g_up1, mut g_s1) = tensor::split_channels(&g, w2);
        let g = tensor::upsample2_backward(&g_up1);
        let g = self.conv_backward(7, &tape, g, grads, true).unwrap();
        let g = self.conv_backward(6, &tape, g, grads, true).unwrap();
        let w3 = g.channels - w2;
        let (g_up2, mut g_s2) = tensor::split_channels(&g, w3);
        let g = tensor::upsample2_backward(&g_up2);
        let g = self.conv_backward(5, &tape, g, grads, true).unwrap();
        let g = self.conv_backward(4, &tape, g, grads, true).unwrap();
        let (h2, ww2) = tape.dims[1];
        let g = tensor::maxpool2_backward(&g, &tape.argmax[1], w2, h2, ww2);
        g_s2.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        let g = self.conv_backward(3, &tape, g_s2, grads, true).unwrap();
        let g = self.conv_backward(2, &tape, g, grads, true).unwrap();
        let (h1, ww1) = tape.dims[0];
        let g = tensor::maxpool2_backward(&g, &tape.argmax[0], w1, h1, ww1);
        g_s1.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        let g = self.conv_backward(1, &tape, g_s1, grads, true).unwrap();
        self.conv_backward(0, &tape, g, grads, false);
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parameter_count_and_shapes() {
        let net = MiniUnet::new(0);
        assert_eq!(net.feature_dim(), 16);
        let n = net.params().len();
        assert!((90_000..130_000).contains(&n), "{n} parameters");
        let table = net.param_table();
        assert_eq!(table.iter().map(|p| p.len).sum::<usize>(), n);
        let x = Tensor::zeros(1, 16, 24);
        let f = net.forward(&x);
        assert_eq!((f.channels, f.height, f.width), (16, 16, 24));
        assert!(f.data.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn architecture_roundtrip() {
        let net = MiniUnet::with_widths([4, 6, 8], 1);
        let back = MiniUnet::from_architecture(&net.architecture()).unwrap();
        assert_eq!(back.params().len(), net.params().len());
        assert!(MiniUnet::from_architecture("widths=1,2").is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        // L = <features, probe>; spot-check parameters in every layer.
        let net = MiniUnet::with_widths([3, 4, 5], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::from_vec(1, 8, 8, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect());
        let probe: Vec<f32> = (0..3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |net: &MiniUnet| -> f64 {
            let f = net.forward(&input);
            f.data.iter().zip(&probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, tape) = net.forward_train(&input);
        let mut grads = vec![0.0f32; net.params().len()];
        net.backward(tape, &Tensor::from_vec(3, 8, 8, probe.clone()), &mut grads);
        // ReLU and max-pool kinks can sit inside a central-difference
        // interval, so either one-sided difference may stand in for it.
        let h = 1e-3f32;
        let mut checked = 0;
        for spec in net.param_table() {
            for j in [0, spec.len / 2, spec.len - 1] {
                let i = spec.offset + j;
                let mut plus = net.clone();
                plus.params[i] += h;
                let mut minus = net.clone();
                minus.params[i] -= h;
                let base = loss(&net);
                let (lp, lm) = (loss(&plus), loss(&minus));
                let fd = (lp - lm) / (2.0 * h as f64);
                let one_sided = [fd, (lp - base) / h as f64, (base - lm) / h as f64];
                let an = grads[i] as f64;
                let tol = 1e-2 * fd.abs().max(an.abs()).max(1.0);
                if one_sided.iter().all(|d| (d - an).abs() > tol) {
                    panic!("{} [{j}]: fd {fd} vs analytic {an}", spec.name);
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 60);
    }
}
