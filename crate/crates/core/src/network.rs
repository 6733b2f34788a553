//! Encoder–decoder assembly: residual backbone, correlation attention and
//! receptive-field laterals, fusion decoder with side outputs, final head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slc_tensor::nn::child;
use slc_tensor::{Adam, Conv2d, ConvSpec, ConvTranspose2d, Mode, Module, ParamVisitor, Real, Tape, Tensor, Var};

use crate::arfe::{ArfeBlock, ArfeOutput};
use crate::blocks::{BasicBlock, Bottleneck, ConvBlock, ResidualBlock};
use crate::consistency::{build_targets_for_scale, TargetNorm};
use crate::error::{CoreError, Result};
use crate::fcsm::{fcsm_loss, AxisOrder, CorrelationScores, FcsmBlock};
use crate::labels::LabelMap;
use crate::losses::{cross_entropy, hybrid_total, lovasz_softmax, LossWeights};

/// Strides of the five encoder stages.
pub const STAGE_SCALES: [usize; 5] = [2, 4, 8, 16, 32];
/// Scales that may carry attention, receptive-field laterals and side outputs.
pub const LATERAL_SCALES: [usize; 4] = [2, 4, 8, 16];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackboneKind {
    /// One basic residual block per stage.
    #[default]
    Tiny,
    /// Bottleneck blocks arranged 3-4-6-3 after a 7×7 stem and max pool.
    Bottleneck,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(BackboneKind::Tiny),
            "bottleneck" => Ok(BackboneKind::Bottleneck),
            other => Err(format!("unknown backbone `{other}`")),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Bottleneck => "bottleneck",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub in_channels: usize,
    pub stage_widths: [usize; 5],
    pub fcsm_scales: Vec<usize>,
    pub arfe_scales: Vec<usize>,
    pub dilations: (usize, usize),
    pub supervised_fcsm: bool,
    pub backbone: BackboneKind,
    pub loss: LossWeights,
    pub target_norm: TargetNorm,
    pub attention_order: AxisOrder,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_classes: 3,
            in_channels: 3,
            stage_widths: [16, 32, 64, 128, 256],
            fcsm_scales: LATERAL_SCALES.to_vec(),
            arfe_scales: LATERAL_SCALES.to_vec(),
            dilations: (1, 3),
            supervised_fcsm: true,
            backbone: BackboneKind::Tiny,
            loss: LossWeights::default(),
            target_norm: TargetNorm::Softmax,
            attention_order: AxisOrder::RowFirst,
            seed: 0,
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>, String> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

fn format_list(values: &[usize]) -> String {
    if values.is_empty() {
        "none".into()
    } else {
        values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| CoreError::Config(format!("{key} = {value}: {e}")))
}

impl ModelConfig {
    /// Full-size widths with the bottleneck backbone.
    pub fn full(n_classes: usize) -> Self {
        ModelConfig {
            n_classes,
            stage_widths: [64, 256, 512, 1024, 2048],
            backbone: BackboneKind::Bottleneck,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 255 {
            return Err(CoreError::Config(format!("n_classes must be in 1..=255, got {}", self.n_classes)));
        }
        if self.in_channels == 0 || self.stage_widths.contains(&0) {
            return Err(CoreError::Config("channel widths must be positive".into()));
        }
        if self.fcsm_scales.contains(&32) {
            return Err(CoreError::Config("attention cannot be placed at stride 32".into()));
        }
        for (name, scales) in [("fcsm_scales", &self.fcsm_scales), ("arfe_scales", &self.arfe_scales)] {
            if let Some(bad) = scales.iter().find(|s| !LATERAL_SCALES.contains(s)) {
                return Err(CoreError::Config(format!("{name} contains {bad}; allowed 2, 4, 8, 16")));
            }
        }
        if self.dilations.0 == 0 || self.dilations.1 == 0 {
            return Err(CoreError::Config("dilations must be at least 1".into()));
        }
        self.loss.validate()
    }

    /// Set one field from its textual form. Returns `Ok(false)` for a key
    /// this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_classes" => self.n_classes = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "stage_widths" => {
                let v = parse_list(value).map_err(|e| CoreError::Config(format!("{key}: {e}")))?;
                self.stage_widths = v
                    .try_into()
                    .map_err(|v: Vec<usize>| CoreError::Config(format!("stage_widths needs 5 values, got {}", v.len())))?;
            }
            "fcsm_scales" => self.fcsm_scales = parse_list(value).map_err(|e| CoreError::Config(format!("{key}: {e}")))?,
            "arfe_scales" => self.arfe_scales = parse_list(value).map_err(|e| CoreError::Config(format!("{key}: {e}")))?,
            "dilations" => {
                let v = parse_list(value).map_err(|e| CoreError::Config(format!("{key}: {e}")))?;
                match v[..] {
                    [a, b] => self.dilations = (a, b),
                    _ => return Err(CoreError::Config(format!("dilations needs 2 values, got {value}"))),
                }
            }
            "supervised_fcsm" => self.supervised_fcsm = parse(key, value)?,
            "backbone" => self.backbone = parse(key, value)?,
            "alpha" => self.loss.alpha = parse(key, value)?,
            "beta" => self.loss.beta = parse(key, value)?,
            "gamma" => self.loss.gamma = parse(key, value)?,
            "target_norm" => self.target_norm = parse(key, value)?,
            "attention_order" => self.attention_order = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// All fields as `key = value` pairs accepted by [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_classes", self.n_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("stage_widths", format_list(&self.stage_widths)),
            ("fcsm_scales", format_list(&self.fcsm_scales)),
            ("arfe_scales", format_list(&self.arfe_scales)),
            ("dilations", format!("{},{}", self.dilations.0, self.dilations.1)),
            ("supervised_fcsm", self.supervised_fcsm.to_string()),
            ("backbone", self.backbone.to_string()),
            ("alpha", self.loss.alpha.to_string()),
            ("beta", self.loss.beta.to_string()),
            ("gamma", self.loss.gamma.to_string()),
            ("target_norm", self.target_norm.to_string()),
            ("attention_order", self.attention_order.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Weight actually applied to the correlation loss.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            alpha: if self.supervised_fcsm { self.loss.alpha } else { 0.0 },
            ..self.loss
        }
    }
}

// ------------------------------------------------------------------- backbone

#[derive(Clone, Debug)]
pub struct Stage<T: Real> {
    pub entry: Option<ConvBlock<T>>,
    /// 3×3 stride-2 max pool before the blocks.
    pub pool: bool,
    pub blocks: Vec<ResidualBlock<T>>,
}

impl<T: Real> Stage<T> {
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut y = x;
        if let Some(e) = &mut self.entry {
            y = e.forward(tape, y, mode)?;
        }
        if self.pool {
            y = tape.max_pool(y, 3, 2, 1)?;
        }
        for b in &mut self.blocks {
            y = b.forward(tape, y, mode)?;
        }
        Ok(y)
    }
}

impl<T: Real> Module<T> for Stage<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        if let Some(e) = &mut self.entry {
            e.visit(&child(prefix, "entry"), v);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&child(prefix, &format!("block{i}")), v);
        }
    }
}

/// Five stages at strides 2..32.
pub fn build_backbone<T: Real>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Stage<T>> {
    let w = config.stage_widths;
    match config.backbone {
        BackboneKind::Tiny => {
            let mut stages = vec![Stage {
                entry: Some(ConvBlock::new(config.in_channels, w[0], 3, 2, 1, rng)),
                pool: false,
                blocks: vec![ResidualBlock::Basic(BasicBlock::new(w[0], w[0], 1, rng))],
            }];
            for i in 1..5 {
                stages.push(Stage {
                    entry: None,
                    pool: false,
                    blocks: vec![ResidualBlock::Basic(BasicBlock::new(w[i - 1], w[i], 2, rng))],
                });
            }
            stages
        }
        BackboneKind::Bottleneck => {
            let mut stages = vec![Stage {
                entry: Some(ConvBlock::new(config.in_channels, w[0], 7, 2, 1, rng)),
                pool: false,
                blocks: Vec::new(),
            }];
            for (i, &count) in [3usize, 4, 6, 3].iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                let mut blocks = vec![ResidualBlock::Bottleneck(Bottleneck::new(w[i], w[i + 1], stride, rng))];
                for _ in 1..count {
                    blocks.push(ResidualBlock::Bottleneck(Bottleneck::new(w[i + 1], w[i + 1], 1, rng)));
                }
                stages.push(Stage {
                    entry: None,
                    pool: i == 0,
                    blocks,
                });
            }
            stages
        }
    }
}

// -------------------------------------------------------------------- decoder

/// Transposed-conv upsample, center crop to a common size, concatenate with
/// the lateral, refine.
#[derive(Clone, Debug)]
pub struct Ffm<T: Real> {
    pub up: ConvTranspose2d<T>,
    pub refine: ConvBlock<T>,
}

impl<T: Real> Ffm<T> {
    pub fn new(top_channels: usize, lateral_channels: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Ffm {
            up: ConvTranspose2d::new(top_channels, width, 2, 2, rng),
            refine: ConvBlock::conv3(width + lateral_channels, width, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, top: Var, lateral: Var, mode: Mode) -> Result<Var> {
        let up = self.up.forward(tape, top)?;
        let (_, _, uh, uw) = tape.value(up).nchw()?;
        let (_, _, lh, lw) = tape.value(lateral).nchw()?;
        let (h, w) = (uh.min(lh), uw.min(lw));
        let up = if (uh, uw) == (h, w) { up } else { tape.center_crop(up, h, w)? };
        let lateral = if (lh, lw) == (h, w) { lateral } else { tape.center_crop(lateral, h, w)? };
        let cat = tape.concat(&[up, lateral], 1)?;
        Ok(self.refine.forward(tape, cat, mode)?)
    }
}

impl<T: Real> Module<T> for Ffm<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.up.visit(&child(prefix, "up"), v);
        self.refine.visit(&child(prefix, "refine"), v);
    }
}

/// Conv block then 1×1 classifier.
#[derive(Clone, Debug)]
pub struct SideOutput<T: Real> {
    pub block: ConvBlock<T>,
    pub classify: Conv2d<T>,
}

impl<T: Real> SideOutput<T> {
    pub fn new(width: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        SideOutput {
            block: ConvBlock::conv3(width, width, rng),
            classify: Conv2d::new(width, n_classes, 1, ConvSpec::default(), true, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.block.forward(tape, x, mode)?;
        Ok(self.classify.forward(tape, y)?)
    }
}

impl<T: Real> Module<T> for SideOutput<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.block.visit(&child(prefix, "block"), v);
        self.classify.visit(&child(prefix, "classify"), v);
    }
}

/// Stride-2 transposed conv to full resolution, conv block, 1×1 classifier.
#[derive(Clone, Debug)]
pub struct Head<T: Real> {
    pub up: ConvTranspose2d<T>,
    pub block: ConvBlock<T>,
    pub classify: Conv2d<T>,
}

impl<T: Real> Head<T> {
    pub fn new(width: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            up: ConvTranspose2d::new(width, width, 2, 2, rng),
            block: ConvBlock::conv3(width, width, rng),
            classify: Conv2d::new(width, n_classes, 1, ConvSpec::default(), true, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, height: usize, width: usize, mode: Mode) -> Result<Var> {
        let mut y = self.up.forward(tape, x)?;
        if tape.shape(y)[2..] != [height, width] {
            y = tape.center_crop(y, height, width)?;
        }
        let y = self.block.forward(tape, y, mode)?;
        Ok(self.classify.forward(tape, y)?)
    }
}

impl<T: Real> Module<T> for Head<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.up.visit(&child(prefix, "up"), v);
        self.block.visit(&child(prefix, "block"), v);
        self.classify.visit(&child(prefix, "classify"), v);
    }
}

// -------------------------------------------------------------------- network

#[derive(Clone, Debug)]
pub struct Slcnet<T: Real> {
    pub config: ModelConfig,
    pub backbone: Vec<Stage<T>>,
    pub neck: [ConvBlock<T>; 2],
    /// Indexed like [`LATERAL_SCALES`].
    pub fcsm: Vec<Option<FcsmBlock<T>>>,
    pub arfe: Vec<Option<ArfeBlock<T>>>,
    pub ffm: Vec<Ffm<T>>,
    pub side: Vec<SideOutput<T>>,
    pub head: Head<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub final_logits: Var,
    /// Side logits at strides 2, 4, 8, 16.
    pub side_logits: Vec<Var>,
    /// Scores per attention-carrying scale.
    pub fcsm_scores: Vec<(usize, CorrelationScores)>,
    /// Switch weights per receptive-field scale.
    pub arfe_switches: Vec<(usize, Var)>,
    /// Encoder stage outputs at strides 2..32.
    pub stages: Vec<Var>,
}

impl<T: Real> Slcnet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.stage_widths;
        let backbone = build_backbone(&config, &mut rng);
        let neck = [ConvBlock::conv3(w[4], w[4], &mut rng), ConvBlock::conv3(w[4], w[4], &mut rng)];
        let mut fcsm = Vec::new();
        let mut arfe = Vec::new();
        for (i, s) in LATERAL_SCALES.iter().enumerate() {
            fcsm.push(
                config
                    .fcsm_scales
                    .contains(s)
                    .then(|| FcsmBlock::new(w[i], config.supervised_fcsm, config.attention_order, &mut rng)),
            );
            arfe.push(
                config
                    .arfe_scales
                    .contains(s)
                    .then(|| ArfeBlock::new(config.in_channels, w[i], config.dilations, &mut rng)),
            );
        }
        let mut ffm = Vec::new();
        let mut side = Vec::new();
        for i in 0..4 {
            let lateral = if arfe[i].is_some() { 2 * w[i] } else { w[i] };
            ffm.push(Ffm::new(w[i + 1], lateral, w[i], &mut rng));
            side.push(SideOutput::new(w[i], config.n_classes, &mut rng));
        }
        let head = Head::new(w[0], config.n_classes, &mut rng);
        Ok(Slcnet {
            config,
            backbone,
            neck,
            fcsm,
            arfe,
            ffm,
            side,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, h, w] if *c == self.config.in_channels && *h >= 32 && *w >= 32 && h % 2 == 0 && w % 2 == 0 => Ok(()),
            _ => Err(CoreError::Contract(format!(
                "input must be (N, {}, H, W) with H, W even and at least 32, got {shape:?}",
                self.config.in_channels
            ))),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, image: Var, mode: Mode) -> Result<ForwardOutputs> {
        self.check_input(tape.shape(image))?;
        let (_, _, height, width) = tape.value(image).nchw()?;
        let mut stages = Vec::with_capacity(5);
        let mut x = image;
        for stage in &mut self.backbone {
            x = stage.forward(tape, x, mode)?;
            stages.push(x);
        }
        let mut fcsm_scores = Vec::new();
        let mut arfe_switches = Vec::new();
        let mut laterals = Vec::with_capacity(4);
        for (i, &scale) in LATERAL_SCALES.iter().enumerate() {
            let mut lateral = stages[i];
            if let Some(block) = &mut self.fcsm[i] {
                let o = block.forward(tape, lateral, mode)?;
                fcsm_scores.push((scale, o.scores));
                lateral = o.out;
            }
            if let Some(block) = &mut self.arfe[i] {
                let pooled = tape.avg_pool(image, scale)?;
                let ArfeOutput { out, switch } = block.forward(tape, pooled, mode)?;
                arfe_switches.push((scale, switch));
                lateral = tape.concat(&[lateral, out], 1)?;
            }
            laterals.push(lateral);
        }
        let mut top = stages[4];
        for n in &mut self.neck {
            top = n.forward(tape, top, mode)?;
        }
        let mut side_logits = vec![top; 4];
        for i in (0..4).rev() {
            top = self.ffm[i].forward(tape, top, laterals[i], mode)?;
            side_logits[i] = self.side[i].forward(tape, top, mode)?;
        }
        let final_logits = self.head.forward(tape, top, height, width, mode)?;
        Ok(ForwardOutputs {
            final_logits,
            side_logits,
            fcsm_scores,
            arfe_switches,
            stages,
        })
    }

    /// Eval-mode logits for a batch of images.
    pub fn predict_logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.final_logits).clone())
    }
}

impl<T: Real> Module<T> for Slcnet<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        for (i, s) in self.backbone.iter_mut().enumerate() {
            s.visit(&child(prefix, &format!("backbone.stage{}", i + 1)), v);
        }
        for (i, n) in self.neck.iter_mut().enumerate() {
            n.visit(&child(prefix, &format!("neck.{i}")), v);
        }
        for (i, scale) in LATERAL_SCALES.iter().enumerate() {
            if let Some(f) = &mut self.fcsm[i] {
                f.visit(&child(prefix, &format!("fcsm{scale}")), v);
            }
            if let Some(a) = &mut self.arfe[i] {
                a.visit(&child(prefix, &format!("arfe{scale}")), v);
            }
            self.ffm[i].visit(&child(prefix, &format!("ffm{scale}")), v);
            self.side[i].visit(&child(prefix, &format!("side{scale}")), v);
        }
        self.head.visit(&child(prefix, "head"), v);
    }
}

/// Per-pixel argmax over channels of `(N, n, H, W)` logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = logits.nchw()?;
    let hw = h * w;
    let d = logits.data();
    (0..n)
        .map(|b| {
            let ids = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(b * c + k) * hw + p] > d[(b * c + best) * hw + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, ids, crate::labels::DEFAULT_IGNORE)
        })
        .collect()
}

// ------------------------------------------------------------------- training

/// A batch of images `(N, C, H, W)` with one label map per image.
#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    pub labels: Vec<LabelMap>,
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub fcsm: f64,
    pub side: f64,
    pub lovasz: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={} fcsm={} side={} final={}",
            self.total, self.fcsm, self.side, self.lovasz
        )
    }
}

/// Loss nodes on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub fcsm: Var,
    pub side: Var,
    pub lovasz: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item().as_f64(),
            fcsm: tape.value(self.fcsm).item().as_f64(),
            side: tape.value(self.side).item().as_f64(),
            lovasz: tape.value(self.lovasz).item().as_f64(),
        }
    }
}

fn sum_terms<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&v) => v,
        None => return Ok(tape.constant(Tensor::scalar(T::zero()))),
    };
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Side cross-entropy summed over scales, Lovász-softmax on the final
/// probabilities, correlation L1 summed over attention scales, and the
/// weighted total.
pub fn compute_losses<T: Real>(tape: &mut Tape<T>, out: &ForwardOutputs, labels: &[LabelMap], config: &ModelConfig) -> Result<LossVars> {
    let mut side = Vec::new();
    for (&scale, &logits) in LATERAL_SCALES.iter().zip(&out.side_logits) {
        let small: Vec<LabelMap> = labels.iter().map(|l| l.downsample_nearest(scale)).collect();
        side.push(cross_entropy(tape, logits, &small)?.value);
    }
    let side = sum_terms(tape, &side)?;
    let probs = tape.softmax(out.final_logits, 1)?;
    let lovasz = lovasz_softmax(tape, probs, labels)?.value;
    let mut corr = Vec::new();
    for (scale, scores) in &out.fcsm_scores {
        let targets: Vec<_> = labels.iter().map(|l| build_targets_for_scale(l, *scale, config.target_norm)).collect();
        corr.push(fcsm_loss(tape, scores, &targets)?.value);
    }
    let fcsm = sum_terms(tape, &corr)?;
    let total = hybrid_total(tape, fcsm, side, lovasz, &config.effective_weights())?;
    Ok(LossVars {
        total,
        fcsm,
        side,
        lovasz,
    })
}

/// One optimisation step. `step` only labels diagnostics.
pub fn train_step<T: Real>(model: &mut Slcnet<T>, optimizer: &mut Adam<T>, batch: &Batch<T>, step: u64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, x, Mode::Train)?;
    let losses = compute_losses(&mut tape, &out, &batch.labels, &model.config)?;
    let breakdown = losses.breakdown(&tape);
    if ![breakdown.total, breakdown.fcsm, breakdown.side, breakdown.lovasz].iter().all(|v| v.is_finite()) {
        return Err(CoreError::NumericalAbort {
            step,
            detail: breakdown.to_string(),
        });
    }
    tape.backward(losses.total)?;
    model.zero_grad();
    model.collect_grads(&tape);
    optimizer.step(model);
    Ok(breakdown)
}

/// Base rate divided by 10 at every drop epoch already reached.
pub fn lr_at(epoch: usize, base: f64, drops: &[usize]) -> f64 {
    let n = drops.iter().filter(|&&d| epoch >= d).count();
    base / 10f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps_down() {
        assert_eq!(lr_at(0, 1e-4, &[10, 20]), 1e-4);
        assert!((lr_at(10, 1e-4, &[10, 20]) - 1e-5).abs() < 1e-20);
        assert!((lr_at(25, 1e-4, &[10, 20]) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut c = ModelConfig {
            fcsm_scales: vec![4, 8],
            arfe_scales: vec![],
            supervised_fcsm: false,
            seed: 9,
            ..ModelConfig::default()
        };
        c.loss.beta = 0.25;
        let mut back = ModelConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.set("epochs", "3").unwrap());
    }

    #[test]
    fn stride_32_attention_is_rejected() {
        let c = ModelConfig {
            fcsm_scales: vec![16, 32],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(Slcnet::<f32>::new(c).is_err());
    }

    #[test]
    fn undersized_or_odd_input_is_rejected() {
        let mut net = Slcnet::<f32>::new(ModelConfig::default()).unwrap();
        for shape in [[1, 3, 30, 64], [1, 3, 64, 33], [1, 1, 64, 64]] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&shape));
            assert!(net.forward(&mut tape, x, Mode::Train).is_err());
        }
    }
}
