//! Layers built on the tensor graph: dense, MLP, GRU cell, and the
//! strided CNN encoder / transposed-CNN decoder pair.
//!
//! Every layer exposes its parameters as `(name, tensor)` pairs so the
//! optimizer and the checkpoint container can address them stably.

use super::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Activation applied between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Elu,
    Tanh,
    None,
}

impl Act {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Act::Elu => x.elu(),
            Act::Tanh => x.tanh(),
            Act::None => x.clone(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Xavier-uniform dense layer, `y = x W + b` with `W (in, out)`.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Linear {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            w: Tensor::param(uniform(rng, &[in_dim, out_dim], limit)),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[out_dim]))),
        }
    }

    /// All-zero weights and bias; used for value heads that must start at 0.
    pub fn zeros_init(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            w: Tensor::param(ArrayD::zeros(IxDyn(&[in_dim, out_dim]))),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[out_dim]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_rowvec(&self.b)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }

    fn clone_detached(&self) -> Linear {
        Linear {
            w: self.w.detach(),
            b: self.b.detach(),
        }
    }

    fn copy_data_from(&self, other: &Linear) {
        self.w.set_data(other.w.data().clone());
        self.b.set_data(other.b.data().clone());
    }
}

/// Dense stack with a shared hidden activation and a linear output layer.
pub struct Mlp {
    layers: Vec<Linear>,
    act: Act,
}

impl Mlp {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        act: Act,
    ) -> Mlp {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(Linear::new(rng, prev, h));
            prev = h;
        }
        layers.push(Linear::new(rng, prev, out_dim));
        Mlp { layers, act }
    }

    /// Same as [`Mlp::new`] but the output layer starts at exactly zero.
    pub fn new_zero_output(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        act: Act,
    ) -> Mlp {
        let mut mlp = Mlp::new(rng, in_dim, hidden, out_dim, act);
        let last = mlp.layers.len() - 1;
        mlp.layers[last] = Linear::zeros_init(
            if hidden.is_empty() { in_dim } else { hidden[hidden.len() - 1] },
            out_dim,
        );
        mlp
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h = self.act.apply(&h);
            }
        }
        h
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.l{i}"), out);
        }
    }

    /// Frozen copy sharing no graph state; used for slow target networks.
    pub fn clone_detached(&self) -> Mlp {
        Mlp {
            layers: self.layers.iter().map(Linear::clone_detached).collect(),
            act: self.act,
        }
    }

    /// Hard-copy parameter values from `other` (shapes must match).
    pub fn copy_data_from(&self, other: &Mlp) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter().zip(other.layers.iter()) {
            a.copy_data_from(b);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Gated recurrent unit cell over `(B, in)` inputs and `(B, hidden)` state.
pub struct GruCell {
    wx: Tensor, // (in, 3H): reset, update, candidate
    wh: Tensor, // (H, 3H)
    b: Tensor,  // (3H,)
    hidden: usize,
}

impl GruCell {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> GruCell {
        let limit_x = (6.0 / (in_dim + hidden) as f64).sqrt();
        let limit_h = (6.0 / (2 * hidden) as f64).sqrt();
        GruCell {
            wx: Tensor::param(uniform(rng, &[in_dim, 3 * hidden], limit_x)),
            wh: Tensor::param(uniform(rng, &[hidden, 3 * hidden], limit_h)),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[3 * hidden]))),
            hidden,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Tensor {
        let n = self.hidden;
        let gx = x.matmul(&self.wx).add_rowvec(&self.b);
        let gh = h.matmul(&self.wh);
        let r = gx.slice_cols(0, n).add(&gh.slice_cols(0, n)).sigmoid();
        let z = gx.slice_cols(n, 2 * n).add(&gh.slice_cols(n, 2 * n)).sigmoid();
        let cand = gx
            .slice_cols(2 * n, 3 * n)
            .add(&r.mul(&gh.slice_cols(2 * n, 3 * n)))
            .tanh();
        // z = 1 keeps the previous state.
        let keep = z.mul(h);
        let update = z.neg().add_scalar(1.0).mul(&cand);
        keep.add(&update)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wx"), self.wx.clone()));
        out.push((format!("{prefix}.wh"), self.wh.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }

    pub fn num_params(&self) -> usize {
        self.wx.len() + self.wh.len() + self.b.len()
    }
}

struct ConvLayer {
    w: Tensor,
    b: Tensor,
}

impl ConvLayer {
    /// `shape` is (Co, Ci, k, k) for conv and (Ci, Co, k, k) for transposed
    /// conv; `bias_ch` names the output channel count in either layout.
    fn new(rng: &mut ChaCha8Rng, shape: [usize; 4], bias_ch: usize) -> ConvLayer {
        let fan_in = shape[1] * shape[2] * shape[3];
        let fan_out = shape[0] * shape[2] * shape[3];
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        ConvLayer {
            w: Tensor::param(uniform(rng, &shape, limit)),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[bias_ch]))),
        }
    }
}

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Strided CNN image encoder: halves the spatial size per layer down to
/// 4 x 4, then projects the flattened map to `out_dim`.
pub struct ConvEncoder {
    convs: Vec<ConvLayer>,
    dense: Linear,
    img: usize,
    in_ch: usize,
}

impl ConvEncoder {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        img: usize,
        depth: usize,
        out_dim: usize,
    ) -> ConvEncoder {
        assert!(img >= 8 && img.is_power_of_two(), "encoder: image size must be a power of two >= 8");
        let mut convs = Vec::new();
        let mut c = in_ch;
        let mut d = depth;
        let mut size = img;
        while size > 4 {
            convs.push(ConvLayer::new(rng, [d, c, KERNEL, KERNEL], d));
            c = d;
            d *= 2;
            size /= 2;
        }
        let flat = c * 4 * 4;
        ConvEncoder {
            convs,
            dense: Linear::new(rng, flat, out_dim),
            img,
            in_ch,
        }
    }

    /// `x (B, Ci, H, W)` to `(B, out_dim)`; the output is linear.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape[1], self.in_ch, "encoder: channel mismatch");
        assert_eq!(shape[2], self.img, "encoder: image size mismatch");
        let mut h = x.clone();
        for conv in &self.convs {
            h = h.conv2d(&conv.w, &conv.b, STRIDE, PAD).elu();
        }
        let b = h.shape()[0];
        let flat: usize = h.len() / b;
        self.dense.forward(&h.reshape(&[b, flat]))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.c{i}.w"), conv.w.clone()));
            out.push((format!("{prefix}.c{i}.b"), conv.b.clone()));
        }
        self.dense.params(&format!("{prefix}.dense"), out);
    }

    pub fn num_params(&self) -> usize {
        let conv: usize = self.convs.iter().map(|c| c.w.len() + c.b.len()).sum();
        conv + self.dense.w.len() + self.dense.b.len()
    }
}

/// Transposed-CNN image decoder: dense projection to a 4 x 4 map, then
/// doubling layers up to `img`. The final layer is linear.
pub struct ConvDecoder {
    dense: Linear,
    convs: Vec<ConvLayer>,
    c0: usize,
    out_ch: usize,
    img: usize,
}

impl ConvDecoder {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        out_ch: usize,
        img: usize,
        depth: usize,
    ) -> ConvDecoder {
        assert!(img >= 8 && img.is_power_of_two(), "decoder: image size must be a power of two >= 8");
        let n_up = (img / 4).trailing_zeros() as usize;
        let c0 = depth << (n_up - 1);
        let dense = Linear::new(rng, in_dim, c0 * 4 * 4);
        let mut convs = Vec::new();
        let mut c = c0;
        for i in 0..n_up {
            let next = if i + 1 == n_up { out_ch } else { c / 2 };
            // transposed-conv weight layout: (Ci, Co, k, k)
            convs.push(ConvLayer::new(rng, [c, next, KERNEL, KERNEL], next));
            c = next;
        }
        ConvDecoder {
            dense,
            convs,
            c0,
            out_ch,
            img,
        }
    }

    /// `x (B, in_dim)` to `(B, out_ch, img, img)`; the output is linear.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let mut h = self
            .dense
            .forward(x)
            .reshape(&[b, self.c0, 4, 4]);
        for (i, conv) in self.convs.iter().enumerate() {
            h = h.conv_transpose2d(&conv.w, &conv.b, STRIDE, PAD);
            if i + 1 < self.convs.len() {
                h = h.elu();
            }
        }
        debug_assert_eq!(h.shape(), vec![b, self.out_ch, self.img, self.img]);
        h
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.dense.params(&format!("{prefix}.dense"), out);
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.c{i}.w"), conv.w.clone()));
            out.push((format!("{prefix}.c{i}.b"), conv.b.clone()));
        }
    }

    pub fn num_params(&self) -> usize {
        let conv: usize = self.convs.iter().map(|c| c.w.len() + c.b.len()).sum();
        conv + self.dense.w.len() + self.dense.b.len()
    }
}
