//! Per-scale image encoder that blends a small- and a large-dilation branch
//! through a learned channel-wise switch.

use rand::Rng;
use slc_tensor::nn::child;
use slc_tensor::{Conv2d, ConvSpec, Mode, Module, ParamVisitor, Real, Tape, Var};

use crate::blocks::{BasicBlock, ConvBlock};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct ArfeBlock<T: Real> {
    pub stem: ConvBlock<T>,
    pub residual: Vec<BasicBlock<T>>,
    pub small: ConvBlock<T>,
    pub large: ConvBlock<T>,
    /// Global-average-pooled features → 1×1 conv → sigmoid.
    pub switch: Conv2d<T>,
    pub out: ConvBlock<T>,
}

/// Output features and the per-channel switch `(N, C, 1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct ArfeOutput {
    pub out: Var,
    pub switch: Var,
}

impl<T: Real> ArfeBlock<T> {
    pub const RESIDUAL_BLOCKS: usize = 3;

    pub fn new(in_channels: usize, channels: usize, dilations: (usize, usize), rng: &mut impl Rng) -> Self {
        let stem = ConvBlock::conv3(in_channels, channels, rng);
        let residual = (0..Self::RESIDUAL_BLOCKS).map(|_| BasicBlock::new(channels, channels, 1, rng)).collect();
        ArfeBlock {
            stem,
            residual,
            small: ConvBlock::new(channels, channels, 3, 1, dilations.0, rng),
            large: ConvBlock::new(channels, channels, 3, 1, dilations.1, rng),
            switch: Conv2d::new(channels, channels, 1, ConvSpec::default(), true, rng),
            out: ConvBlock::conv3(channels, channels, rng),
        }
    }

    /// Stem and residual blocks.
    pub fn features(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut f = self.stem.forward(tape, x, mode)?;
        for block in &mut self.residual {
            f = block.forward(tape, f, mode)?;
        }
        Ok(f)
    }

    /// `sigmoid(conv(gap(f)))`.
    pub fn switch_weights(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(f)?;
        let s = self.switch.forward(tape, pooled)?;
        Ok(tape.sigmoid(s))
    }

    /// `out(S·small(f) + (1−S)·large(f))` with `S` broadcast over space.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ArfeOutput> {
        let f = self.features(tape, x, mode)?;
        let switch = self.switch_weights(tape, f)?;
        let small = self.small.forward(tape, f, mode)?;
        let large = self.large.forward(tape, f, mode)?;
        let a = tape.mul(small, switch)?;
        let rest = tape.one_minus(switch);
        let b = tape.mul(large, rest)?;
        let mixed = tape.add(a, b)?;
        let out = self.out.forward(tape, mixed, mode)?;
        Ok(ArfeOutput { out, switch })
    }
}

impl<T: Real> Module<T> for ArfeBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.stem.visit(&child(prefix, "stem"), v);
        for (i, b) in self.residual.iter_mut().enumerate() {
            b.visit(&child(prefix, &format!("res{i}")), v);
        }
        self.small.visit(&child(prefix, "small"), v);
        self.large.visit(&child(prefix, "large"), v);
        self.switch.visit(&child(prefix, "switch"), v);
        self.out.visit(&child(prefix, "out"), v);
    }
}

/// Run each block on the image average-pooled by its scale. `blocks` pairs
/// a scale with its own (unshared) block.
pub fn build_arfe_pyramid<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    blocks: &mut [(usize, ArfeBlock<T>)],
    mode: Mode,
) -> Result<Vec<ArfeOutput>> {
    blocks
        .iter_mut()
        .map(|(scale, block)| {
            let pooled = if *scale == 1 { image } else { tape.avg_pool(image, *scale)? };
            block.forward(tape, pooled, mode)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use slc_tensor::Tensor;

    fn random_image(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(&[n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tied_branches_make_output_switch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = ArfeBlock::<f64>::new(3, 4, (2, 2), &mut rng);
        block.large = block.small.clone();
        let x = random_image(2, 6, 6, &mut rng);
        let run = |block: &mut ArfeBlock<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let o = block.forward(&mut tape, xv, Mode::Train).unwrap();
            tape.value(o.out).clone()
        };
        let a = run(&mut block.clone());
        block.switch.bias.as_mut().unwrap().value.fill(-3.0);
        let b = run(&mut block);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn saturated_switch_selects_small_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = ArfeBlock::<f64>::new(3, 4, (1, 3), &mut rng);
        block.switch.weight.value.fill(0.0);
        block.switch.bias.as_mut().unwrap().value.fill(100.0);
        let x = random_image(1, 8, 8, &mut rng);
        let mut reference = block.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let o = block.forward(&mut tape, xv, Mode::Train).unwrap();
        assert!(tape.value(o.switch).data().iter().all(|&s| s == 1.0));
        let f = reference.features(&mut tape, xv, Mode::Train).unwrap();
        let s = reference.small.forward(&mut tape, f, Mode::Train).unwrap();
        let expect = reference.out.forward(&mut tape, s, Mode::Train).unwrap();
        assert!(tape.value(o.out).max_abs_diff(tape.value(expect)) < 1e-12);
    }

    #[test]
    fn constant_image_switch_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = ArfeBlock::<f64>::new(3, 4, (1, 3), &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::full(&[1, 3, 6, 6], 0.4));
        let f = block.clone().features(&mut tape, xv, Mode::Train).unwrap();
        let o = block.forward(&mut tape, xv, Mode::Train).unwrap();
        let f = tape.value(f);
        let (_, c, h, w) = f.nchw().unwrap();
        let gap: Vec<f64> = (0..c).map(|k| f.data()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let wts = block.switch.weight.value.data();
        let bias = block.switch.bias.as_ref().unwrap().value.data();
        for o_c in 0..c {
            let z = bias[o_c] + (0..c).map(|i| wts[o_c * c + i] * gap[i]).sum::<f64>();
            let s = 1.0 / (1.0 + (-z).exp());
            assert!((tape.value(o.switch).data()[o_c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_shapes_and_switch_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut blocks: Vec<(usize, ArfeBlock<f32>)> = [2, 4, 8, 16].iter().map(|&s| (s, ArfeBlock::new(3, 4, (1, 3), &mut rng))).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random_image(1, 64, 64, &mut rng).cast());
        let outs = build_arfe_pyramid(&mut tape, x, &mut blocks, Mode::Train).unwrap();
        for (o, side) in outs.iter().zip([32, 16, 8, 4]) {
            assert_eq!(tape.shape(o.out), &[1, 4, side, side]);
            assert!(tape.value(o.switch).data().iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }

    #[test]
    fn checkerboard_pools_to_half() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..3 * 16).map(|i| ((i % 4 + i / 4) % 2) as f64).collect();
        let x = tape.constant(Tensor::new(&[1, 3, 4, 4], data).unwrap());
        let p = tape.avg_pool(x, 2).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }
}
