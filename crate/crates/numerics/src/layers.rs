use rand::Rng;

use crate::error::Result;
use crate::param::{Module, Parameter};
use crate::tape::{Tape, Var};

/// How a layer's parameters enter the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Recorded as parameters; gradients are reported.
    Trainable,
    /// Recorded as constants; the layer is a fixed function on this tape.
    Frozen,
}

impl Binding {
    pub fn bind(self, tape: &mut Tape, p: &Parameter) -> Result<Var> {
        match self {
            Binding::Trainable => tape.param(p),
            Binding::Frozen => tape.frozen(p),
        }
    }
}

/// Fully connected layer, `y = xW + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialisation for both weight and bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Parameter::uniform(format!("{name}.weight"), &[fan_in, fan_out], bound, rng),
            bias: Parameter::uniform(format!("{name}.bias"), &[fan_out], bound, rng),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let w = binding.bind(tape, &self.weight)?;
        let b = binding.bind(tape, &self.bias)?;
        tape.affine(x, w, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Square-kernel valid convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: Parameter,
    pub bias: Parameter,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel_size * kernel_size;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            kernel: Parameter::uniform(
                format!("{name}.kernel"),
                &[out_channels, in_channels, kernel_size, kernel_size],
                bound,
                rng,
            ),
            bias: Parameter::uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            stride,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    /// Output side length for a square input of side `input`.
    pub fn output_side(&self, input: usize) -> usize {
        (input - self.kernel_size()) / self.stride + 1
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let k = binding.bind(tape, &self.kernel)?;
        let b = binding.bind(tape, &self.bias)?;
        tape.conv2d(x, k, b, self.stride)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.kernel);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn new(name: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h, binding)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }
}

impl Module for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.layers.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.layers.visit_mut(f)
    }
}
