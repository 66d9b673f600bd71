//! Expert encoders: a dense stack for flat observations and a convolutional
//! stack for grid observations. Hidden layers use ReLU; the final layer is
//! linear, since the suite-level activation is applied after task
//! combination.

use rand_chacha::ChaCha8Rng;

use crate::numkit::{Error, Tape, Tensor};

#[derive(Clone)]
pub struct DenseLayer {
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

impl DenseLayer {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: Tensor::uniform_param(&[in_dim, out_dim], bound, rng),
            b: Tensor::uniform_param(&[out_dim], bound, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, Error> {
        let y = tape.matmul(x, &self.w)?;
        tape.add_row(&y, &self.b)
    }
}

#[derive(Clone)]
pub struct ConvLayer {
    pub k: Tensor, // [cout, cin, kh, kw]; bias-free, GS renormalizes anyway
    pub stride: usize,
}

impl ConvLayer {
    pub fn init(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Self {
            k: Tensor::uniform_param(&[cout, cin, kernel, kernel], bound, rng),
            stride,
        }
    }
}

/// A multi-layer perceptron: ReLU between layers, linear output.
#[derive(Clone)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

impl DenseNet {
    /// `dims` = [in, h1, ..., out].
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "DenseNet needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, Error> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &h)?;
            if i != last {
                h = tape.relu(&h)?;
            }
        }
        Ok(h)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{i}.w"), layer.w.clone()));
            out.push((format!("{prefix}.layer{i}.b"), layer.b.clone()));
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape()[1]
    }
}

/// A convolutional stack over [B, cin, h, w], flattened to [B, d] at the end.
#[derive(Clone)]
pub struct ConvNet {
    pub convs: Vec<ConvLayer>,
    pub out_dim: usize,
}

impl ConvNet {
    pub fn init(
        input: (usize, usize, usize),
        channels: &[usize],
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (mut c, mut h, mut w) = input;
        let mut convs = Vec::new();
        for &cout in channels {
            convs.push(ConvLayer::init(c, cout, kernel, stride, rng));
            c = cout;
            h = (h - kernel) / stride + 1;
            w = (w - kernel) / stride + 1;
        }
        Self {
            convs,
            out_dim: c * h * w,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, Error> {
        let batch = x.shape()[0];
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, layer) in self.convs.iter().enumerate() {
            h = tape.conv2d(&h, &layer.k, layer.stride)?;
            if i != last {
                h = tape.relu(&h)?;
            }
        }
        tape.reshape(&h, &[batch, self.out_dim])
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.k"), layer.k.clone()));
        }
    }
}

/// One expert: either stack, same interface.
#[derive(Clone)]
pub enum Encoder {
    Dense(DenseNet),
    Conv(ConvNet),
}

impl Encoder {
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, Error> {
        match self {
            Encoder::Dense(net) => net.forward(tape, x),
            Encoder::Conv(net) => net.forward(tape, x),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Encoder::Dense(net) => net.out_dim(),
            Encoder::Conv(net) => net.out_dim,
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            Encoder::Dense(net) => net.named_params(prefix, out),
            Encoder::Conv(net) => net.named_params(prefix, out),
        }
    }
}
