//! Convolutional building blocks shared by the encoder, decoder and modules.

use rand::Rng;
use slc_tensor::nn::child;
use slc_tensor::{BatchNorm2d, Conv2d, ConvSpec, Mode, Module, ParamVisitor, Real, Result, Tape, Var};

/// Convolution (no bias) → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Real> ConvBlock<T> {
    /// `kernel×kernel` convolution with "same" padding for the given dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let spec = ConvSpec::new(stride, dilation * (kernel - 1) / 2, dilation);
        ConvBlock {
            conv: Conv2d::new(in_channels, out_channels, kernel, spec, false, rng),
            bn: BatchNorm2d::new(out_channels),
        }
    }

    pub fn conv3(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        Self::new(in_channels, out_channels, 3, 1, 1, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        Ok(tape.relu(y))
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.conv.visit(&child(prefix, "conv"), v);
        self.bn.visit(&child(prefix, "bn"), v);
    }
}

/// 1×1 projection shortcut used when a residual block changes shape.
#[derive(Clone, Debug)]
pub struct Projection<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Real> Projection<T> {
    fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Projection {
            conv: Conv2d::new(in_channels, out_channels, 1, ConvSpec::new(stride, 0, 1), false, rng),
            bn: BatchNorm2d::new(out_channels),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        self.bn.forward(tape, y, mode)
    }
}

impl<T: Real> Module<T> for Projection<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.conv.visit(&child(prefix, "conv"), v);
        self.bn.visit(&child(prefix, "bn"), v);
    }
}

fn shortcut<T: Real>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Option<Projection<T>> {
    (stride != 1 || in_channels != out_channels).then(|| Projection::new(in_channels, out_channels, stride, rng))
}

/// Two 3×3 convolutions with an identity or projected skip.
#[derive(Clone, Debug)]
pub struct BasicBlock<T: Real> {
    pub conv1: ConvBlock<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<Projection<T>>,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        BasicBlock {
            conv1: ConvBlock::new(in_channels, out_channels, 3, stride, 1, rng),
            conv2: Conv2d::new(out_channels, out_channels, 3, ConvSpec::same(3, 1), false, rng),
            bn2: BatchNorm2d::new(out_channels),
            shortcut: shortcut(in_channels, out_channels, stride, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(tape, x, mode)?;
        let y = self.conv2.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, mode)?;
        let skip = match &mut self.shortcut {
            Some(p) => p.forward(tape, x, mode)?,
            None => x,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

impl<T: Real> Module<T> for BasicBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.conv1.visit(&child(prefix, "conv1"), v);
        self.conv2.visit(&child(prefix, "conv2"), v);
        self.bn2.visit(&child(prefix, "bn2"), v);
        if let Some(s) = &mut self.shortcut {
            s.visit(&child(prefix, "shortcut"), v);
        }
    }
}

/// 1×1 reduce → 3×3 (strided) → 1×1 expand, with a skip.
#[derive(Clone, Debug)]
pub struct Bottleneck<T: Real> {
    pub reduce: ConvBlock<T>,
    pub spatial: ConvBlock<T>,
    pub expand: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub shortcut: Option<Projection<T>>,
}

impl<T: Real> Bottleneck<T> {
    pub const EXPANSION: usize = 4;

    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let mid = (out_channels / Self::EXPANSION).max(1);
        Bottleneck {
            reduce: ConvBlock::new(in_channels, mid, 1, 1, 1, rng),
            spatial: ConvBlock::new(mid, mid, 3, stride, 1, rng),
            expand: Conv2d::new(mid, out_channels, 1, ConvSpec::default(), false, rng),
            bn3: BatchNorm2d::new(out_channels),
            shortcut: shortcut(in_channels, out_channels, stride, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.reduce.forward(tape, x, mode)?;
        let y = self.spatial.forward(tape, y, mode)?;
        let y = self.expand.forward(tape, y)?;
        let y = self.bn3.forward(tape, y, mode)?;
        let skip = match &mut self.shortcut {
            Some(p) => p.forward(tape, x, mode)?,
            None => x,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

impl<T: Real> Module<T> for Bottleneck<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.reduce.visit(&child(prefix, "reduce"), v);
        self.spatial.visit(&child(prefix, "spatial"), v);
        self.expand.visit(&child(prefix, "expand"), v);
        self.bn3.visit(&child(prefix, "bn3"), v);
        if let Some(s) = &mut self.shortcut {
            s.visit(&child(prefix, "shortcut"), v);
        }
    }
}

/// Either residual block flavour, so stages can hold a uniform list.
#[derive(Clone, Debug)]
pub enum ResidualBlock<T: Real> {
    Basic(BasicBlock<T>),
    Bottleneck(Bottleneck<T>),
}

impl<T: Real> ResidualBlock<T> {
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            ResidualBlock::Basic(b) => b.forward(tape, x, mode),
            ResidualBlock::Bottleneck(b) => b.forward(tape, x, mode),
        }
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        match self {
            ResidualBlock::Basic(b) => b.visit(prefix, v),
            ResidualBlock::Bottleneck(b) => b.visit(prefix, v),
        }
    }
}
