//! Compact encoder/decoder binary-segmentation network.
//!
//! Four residual stages (strides 2, 2, 2, 1; the last stage trades its
//! stride for dilation 2), an atrous-pyramid context head on the deepest
//! features, and a decoder that fuses upsampled context with projected
//! stage-1 features. SNR blocks sit after the last residual block of each
//! configured stage; the enhanced map is what flows on. In train mode a
//! second, photometrically transformed image runs the encoder up to the
//! deepest SRW stage so both covariances can be captured per stage.
//!
//! Parameters are read-only during forward; concurrent eval-mode forwards
//! are safe. Training is the single writer.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, IswStageState, TrainState};

use ndarray::{Array3, Array4, ArrayD, Ix4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, bilinear_resize, conv2d, Conv2dSpec, Graph, Var};
use crate::element::Element;
use crate::error::{Result, SrwError};
use crate::snr::{self, attention_hidden_width, AttentionMode, SnrOutput, SnrParamVars};

/// Residual blocks per stage.
const BLOCKS_PER_STAGE: usize = 2;
/// Channels of each atrous branch.
const ASPP_BRANCH_CHANNELS: usize = 64;
/// Channels after the pyramid projection.
const ASPP_OUT_CHANNELS: usize = 128;
/// Channels of the projected stage-1 skip connection.
const DECODER_SKIP_CHANNELS: usize = 24;
/// Channels of the two decoder convolutions.
const DECODER_CHANNELS: usize = 48;
/// Image inputs are RGB.
const INPUT_CHANNELS: usize = 3;

/// Architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Output channels of the four encoder stages.
    pub stage_channels: [usize; 4],
    /// Stages (1-based) that host an SRW block. Deep layers carry little
    /// style, so the default stops at stage 3.
    pub srw_stages: Vec<usize>,
    /// Dilations of the pyramid branches; 1 means a 1x1 branch.
    pub aspp_dilations: Vec<usize>,
    /// Segmentation classes; this network is binary.
    pub num_classes: usize,
    /// Default (height, width) for training inputs; must be divisible by 16.
    pub input_size: (usize, usize),
    /// Reduction ratio of the SNR attention bottleneck.
    pub snr_reduction: usize,
    /// Epsilon of every instance normalization.
    pub norm_eps: f64,
    /// Attention pooling mode of the SNR blocks.
    pub attention: AttentionMode,
    /// Zero-center features before the covariance used by the whitening
    /// losses.
    pub center_before_cov: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stage_channels: [32, 64, 128, 256],
            srw_stages: vec![1, 2, 3],
            aspp_dilations: vec![1, 6, 12],
            num_classes: 2,
            input_size: (64, 64),
            snr_reduction: 16,
            norm_eps: 1e-5,
            attention: AttentionMode::PerSample,
            center_before_cov: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(SrwError::Config("stage_channels must all be positive".into()));
        }
        let mut sorted = self.srw_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.srw_stages.len() || self.srw_stages != sorted {
            return Err(SrwError::Config(
                "srw_stages must be sorted and free of duplicates".into(),
            ));
        }
        if self.srw_stages.iter().any(|&s| s < 1 || s > 4) {
            return Err(SrwError::Config("srw_stages entries must lie in 1..=4".into()));
        }
        if self.aspp_dilations.is_empty() || self.aspp_dilations.iter().any(|&d| d == 0) {
            return Err(SrwError::Config("aspp_dilations must be non-empty and positive".into()));
        }
        if self.num_classes != 2 {
            return Err(SrwError::Config("num_classes must be 2 (binary task)".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(SrwError::Config(format!(
                "input_size must be positive and divisible by 16, got {h}x{w}"
            )));
        }
        if self.snr_reduction == 0 {
            return Err(SrwError::Config("snr_reduction must be >= 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(SrwError::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Deepest stage with an SRW block, if any.
    pub fn max_srw_stage(&self) -> Option<usize> {
        self.srw_stages.iter().copied().max()
    }
}

/// Handle to one parameter tensor of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in deterministic creation order.
#[derive(Debug, Clone)]
pub struct ParamStore<A: Element> {
    entries: Vec<(String, ArrayD<A>)>,
}

impl<A: Element> ParamStore<A> {
    fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, value: ArrayD<A>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<A> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<A> {
        &mut self.entries[id.0].1
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<A>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

#[derive(Debug, Clone, Copy)]
struct SnrLayout {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
struct StageLayout {
    blocks: Vec<BlockLayout>,
    snr: Option<SnrLayout>,
}

#[derive(Debug, Clone)]
struct AsppLayout {
    branches: Vec<ConvLayer>,
    image_pool: ConvLayer,
    project: ConvLayer,
}

#[derive(Debug, Clone)]
struct DecoderLayout {
    skip_proj: ConvLayer,
    conv1: ConvLayer,
    conv2: ConvLayer,
    classifier: ConvLayer,
}

#[derive(Debug, Clone)]
struct ModelLayout {
    stages: Vec<StageLayout>,
    aspp: AsppLayout,
    decoder: DecoderLayout,
}

/// The segmentation model: configuration, parameters, and wiring.
#[derive(Debug, Clone)]
pub struct Model<A: Element> {
    config: NetworkConfig,
    params: ParamStore<A>,
    layout: ModelLayout,
}

/// Forward pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Per-graph map from [`ParamId`] to the bound [`Var`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    fn new(n: usize) -> Self {
        Binding { vars: vec![None; n] }
    }

    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}

/// Everything a forward pass produces beyond the prediction itself.
pub struct ForwardArtifacts {
    /// Class logits at input resolution, `[N, num_classes, H, W]`.
    pub logits: Var,
    /// SNR outputs of the raw path, one per configured SRW stage (in order).
    pub per_stage_snr: Vec<SnrOutput>,
    /// SNR outputs of the transformed path; train mode only.
    pub per_stage_snr_aug: Vec<SnrOutput>,
    /// Covariances of the enhanced features, raw path; train mode only.
    pub per_stage_theta_raw: Vec<Var>,
    /// Covariances of the enhanced features, transformed path; train mode only.
    pub per_stage_theta_aug: Vec<Var>,
    /// Parameter bindings of this graph (for gradient lookup).
    pub binding: Binding,
}

struct InitCtx {
    rng: ChaCha8Rng,
}

impl InitCtx {
    fn conv_weight<A: Element>(
        &mut self,
        cout: usize,
        cin: usize,
        k: usize,
    ) -> ArrayD<A> {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        ArrayD::from_shape_fn(ndarray::IxDyn(&[cout, cin, k, k]), |_| {
            A::lit(dist.sample(&mut self.rng))
        })
    }

    fn fc_weight<A: Element>(&mut self, rows: usize, cols: usize) -> ArrayD<A> {
        let std = (2.0 / rows as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        ArrayD::from_shape_fn(ndarray::IxDyn(&[rows, cols]), |_| {
            A::lit(dist.sample(&mut self.rng))
        })
    }
}

fn add_conv<A: Element>(
    params: &mut ParamStore<A>,
    ctx: &mut InitCtx,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    spec: Conv2dSpec,
) -> ConvLayer {
    let w = params.add(format!("{name}.weight"), ctx.conv_weight::<A>(cout, cin, k));
    let b = params.add(format!("{name}.bias"), ArrayD::zeros(ndarray::IxDyn(&[cout])));
    ConvLayer { w, b, spec }
}

/// Builds a model with deterministic He-style initialization.
pub fn build_model<A: Element>(config: &NetworkConfig, seed: u64) -> Result<Model<A>> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut ctx = InitCtx { rng: ChaCha8Rng::seed_from_u64(seed) };

    let strides = [2usize, 2, 2, 1];
    let dilations = [1usize, 1, 1, 2];
    let mut stages = Vec::with_capacity(4);
    let mut cin = INPUT_CHANNELS;
    for s in 0..4 {
        let cout = config.stage_channels[s];
        let mut blocks = Vec::with_capacity(BLOCKS_PER_STAGE);
        for b in 0..BLOCKS_PER_STAGE {
            let stride = if b == 0 { strides[s] } else { 1 };
            let dil = dilations[s];
            let in_ch = if b == 0 { cin } else { cout };
            let name = format!("stage{}.block{}", s + 1, b + 1);
            let conv1 = add_conv(
                &mut params,
                &mut ctx,
                &format!("{name}.conv1"),
                in_ch,
                cout,
                3,
                Conv2dSpec { stride, padding: dil, dilation: dil },
            );
            let conv2 = add_conv(
                &mut params,
                &mut ctx,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                Conv2dSpec { stride: 1, padding: dil, dilation: dil },
            );
            let shortcut = if stride != 1 || in_ch != cout {
                Some(add_conv(
                    &mut params,
                    &mut ctx,
                    &format!("{name}.shortcut"),
                    in_ch,
                    cout,
                    1,
                    Conv2dSpec { stride, padding: 0, dilation: 1 },
                ))
            } else {
                None
            };
            blocks.push(BlockLayout { conv1, conv2, shortcut });
        }
        let snr = if config.srw_stages.contains(&(s + 1)) {
            let hidden = attention_hidden_width(cout, config.snr_reduction);
            let name = format!("stage{}.snr", s + 1);
            Some(SnrLayout {
                fc1_w: params.add(format!("{name}.fc1.weight"), ctx.fc_weight::<A>(cout, hidden)),
                fc1_b: params
                    .add(format!("{name}.fc1.bias"), ArrayD::zeros(ndarray::IxDyn(&[hidden]))),
                fc2_w: params.add(format!("{name}.fc2.weight"), ctx.fc_weight::<A>(hidden, cout)),
                fc2_b: params
                    .add(format!("{name}.fc2.bias"), ArrayD::zeros(ndarray::IxDyn(&[cout]))),
            })
        } else {
            None
        };
        stages.push(StageLayout { blocks, snr });
        cin = cout;
    }

    let c4 = config.stage_channels[3];
    let mut branches = Vec::with_capacity(config.aspp_dilations.len());
    for (i, &d) in config.aspp_dilations.iter().enumerate() {
        let name = format!("aspp.branch{i}");
        let layer = if d == 1 {
            add_conv(&mut params, &mut ctx, &name, c4, ASPP_BRANCH_CHANNELS, 1, Conv2dSpec::unit())
        } else {
            add_conv(
                &mut params,
                &mut ctx,
                &name,
                c4,
                ASPP_BRANCH_CHANNELS,
                3,
                Conv2dSpec { stride: 1, padding: d, dilation: d },
            )
        };
        branches.push(layer);
    }
    let image_pool =
        add_conv(&mut params, &mut ctx, "aspp.image_pool", c4, ASPP_BRANCH_CHANNELS, 1, Conv2dSpec::unit());
    let concat_ch = ASPP_BRANCH_CHANNELS * (config.aspp_dilations.len() + 1);
    let project =
        add_conv(&mut params, &mut ctx, "aspp.project", concat_ch, ASPP_OUT_CHANNELS, 1, Conv2dSpec::unit());
    let aspp = AsppLayout { branches, image_pool, project };

    let skip_proj = add_conv(
        &mut params,
        &mut ctx,
        "decoder.skip_proj",
        config.stage_channels[0],
        DECODER_SKIP_CHANNELS,
        1,
        Conv2dSpec::unit(),
    );
    let conv1 = add_conv(
        &mut params,
        &mut ctx,
        "decoder.conv1",
        ASPP_OUT_CHANNELS + DECODER_SKIP_CHANNELS,
        DECODER_CHANNELS,
        3,
        Conv2dSpec::same3x3(),
    );
    let conv2 = add_conv(
        &mut params,
        &mut ctx,
        "decoder.conv2",
        DECODER_CHANNELS,
        DECODER_CHANNELS,
        3,
        Conv2dSpec::same3x3(),
    );
    let classifier = add_conv(
        &mut params,
        &mut ctx,
        "decoder.classifier",
        DECODER_CHANNELS,
        config.num_classes,
        1,
        Conv2dSpec::unit(),
    );
    let decoder = DecoderLayout { skip_proj, conv1, conv2, classifier };

    Ok(Model { config: config.clone(), params, layout: ModelLayout { stages, aspp, decoder } })
}

struct PathOutput {
    /// Output of each stage after any SNR block, indexed by stage.
    stage_outputs: Vec<Var>,
    /// SNR outputs per configured SRW stage (subset the path reached).
    snr_outputs: Vec<SnrOutput>,
    /// Covariances per configured SRW stage the path reached.
    thetas: Vec<Var>,
}

impl<A: Element> Model<A> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<A> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<A> {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Rebuilds a model from checkpoint pieces; shapes must match the
    /// layout the config implies.
    pub fn from_parts(config: NetworkConfig, values: Vec<(String, ArrayD<A>)>) -> Result<Self> {
        let mut model = build_model::<A>(&config, 0)?;
        if values.len() != model.params.len() {
            return Err(SrwError::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, layout needs {}",
                values.len(),
                model.params.len()
            )));
        }
        for (id, (name, value)) in model.params.ids().zip(values.into_iter()) {
            if model.params.name(id) != name {
                return Err(SrwError::Checkpoint(format!(
                    "parameter order mismatch: expected {}, found {name}",
                    model.params.name(id)
                )));
            }
            if model.params.value(id).shape() != value.shape() {
                return Err(SrwError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, layout needs {:?}",
                    value.shape(),
                    model.params.value(id).shape()
                )));
            }
            *model.params.value_mut(id) = value;
        }
        Ok(model)
    }

    fn bind(&self, g: &mut Graph<A>, binding: &mut Binding, id: ParamId) -> Var {
        if let Some(v) = binding.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.params.value(id).clone());
        binding.vars[id.0] = Some(v);
        v
    }

    fn conv(
        &self,
        g: &mut Graph<A>,
        binding: &mut Binding,
        layer: &ConvLayer,
        x: Var,
    ) -> Result<Var> {
        let w = self.bind(g, binding, layer.w);
        let b = self.bind(g, binding, layer.b);
        conv2d(g, x, w, b, layer.spec)
    }

    fn conv_in_relu(
        &self,
        g: &mut Graph<A>,
        binding: &mut Binding,
        layer: &ConvLayer,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv(g, binding, layer, x)?;
        let y = autodiff::instance_norm(g, y, A::lit(self.config.norm_eps))?;
        Ok(autodiff::relu(g, y))
    }

    fn residual_block(
        &self,
        g: &mut Graph<A>,
        binding: &mut Binding,
        block: &BlockLayout,
        x: Var,
    ) -> Result<Var> {
        let eps = A::lit(self.config.norm_eps);
        let y = self.conv(g, binding, &block.conv1, x)?;
        let y = autodiff::instance_norm(g, y, eps)?;
        let y = autodiff::relu(g, y);
        let y = self.conv(g, binding, &block.conv2, y)?;
        let y = autodiff::instance_norm(g, y, eps)?;
        let short = match &block.shortcut {
            Some(layer) => {
                let s = self.conv(g, binding, layer, x)?;
                autodiff::instance_norm(g, s, eps)?
            }
            None => x,
        };
        let sum = autodiff::add(g, y, short)?;
        Ok(autodiff::relu(g, sum))
    }

    /// Runs the encoder on one input up to `last_stage` (1-based, inclusive),
    /// applying SNR and capturing covariances where configured.
    fn encode(
        &self,
        g: &mut Graph<A>,
        binding: &mut Binding,
        x: Var,
        last_stage: usize,
        capture_theta: bool,
    ) -> Result<PathOutput> {
        let eps = A::lit(self.config.norm_eps);
        let mut feat = x;
        let mut stage_outputs = Vec::with_capacity(last_stage);
        let mut snr_outputs = Vec::new();
        let mut thetas = Vec::new();
        for s in 0..last_stage {
            let stage = &self.layout.stages[s];
            for block in &stage.blocks {
                feat = self.residual_block(g, binding, block, feat)?;
            }
            if let Some(snr_layout) = &stage.snr {
                let vars = SnrParamVars {
                    fc1_w: self.bind(g, binding, snr_layout.fc1_w),
                    fc1_b: self.bind(g, binding, snr_layout.fc1_b),
                    fc2_w: self.bind(g, binding, snr_layout.fc2_w),
                    fc2_b: self.bind(g, binding, snr_layout.fc2_b),
                };
                let out = snr::snr_forward(g, feat, &vars, eps, self.config.attention)?;
                feat = out.enhanced;
                if capture_theta {
                    let cov_in = if self.config.center_before_cov {
                        crate::isw::center_features(g, out.enhanced)?
                    } else {
                        out.enhanced
                    };
                    thetas.push(crate::isw::covariance(g, cov_in)?);
                }
                snr_outputs.push(out);
            }
            stage_outputs.push(feat);
        }
        Ok(PathOutput { stage_outputs, snr_outputs, thetas })
    }

    fn aspp(&self, g: &mut Graph<A>, binding: &mut Binding, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let mut parts = Vec::with_capacity(self.layout.aspp.branches.len() + 1);
        for branch in &self.layout.aspp.branches {
            parts.push(self.conv_in_relu(g, binding, branch, x)?);
        }
        // Image-pool branch: GAP -> 1x1 conv -> relu -> broadcast. No IN on a
        // 1x1 map (it would zero it out).
        let pooled = autodiff::spatial_gap(g, x)?;
        let pooled4 = autodiff::reshape(g, pooled, &[shape[0], shape[1], 1, 1])?;
        let pooled4 = self.conv(g, binding, &self.layout.aspp.image_pool, pooled4)?;
        let pooled4 = autodiff::relu(g, pooled4);
        let pooled2 = autodiff::reshape(g, pooled4, &[shape[0], ASPP_BRANCH_CHANNELS])?;
        parts.push(autodiff::broadcast_spatial(g, pooled2, h, w)?);
        let cat = autodiff::concat_channels(g, &parts)?;
        self.conv_in_relu(g, binding, &self.layout.aspp.project, cat)
    }

    fn decode(
        &self,
        g: &mut Graph<A>,
        binding: &mut Binding,
        aspp_out: Var,
        stage1: Var,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let s1_shape = g.value(stage1).shape().to_vec();
        let up = bilinear_resize(g, aspp_out, (s1_shape[2], s1_shape[3]))?;
        let skip = self.conv_in_relu(g, binding, &self.layout.decoder.skip_proj, stage1)?;
        let cat = autodiff::concat_channels(g, &[up, skip])?;
        let y = self.conv_in_relu(g, binding, &self.layout.decoder.conv1, cat)?;
        let y = self.conv_in_relu(g, binding, &self.layout.decoder.conv2, y)?;
        let logits = self.conv(g, binding, &self.layout.decoder.classifier, y)?;
        bilinear_resize(g, logits, out_hw)
    }

    /// Full forward pass.
    ///
    /// Train mode requires the transformed twin `x_aug` whenever any SRW
    /// stage is configured (it feeds covariance capture only); eval mode
    /// forbids it and captures nothing.
    pub fn forward(
        &self,
        g: &mut Graph<A>,
        x: &Array4<A>,
        x_aug: Option<&Array4<A>>,
        mode: ForwardMode,
    ) -> Result<ForwardArtifacts> {
        let (n, c, h, w) = x.dim();
        if n == 0 || c != INPUT_CHANNELS {
            return Err(SrwError::Validation(format!(
                "forward: expected [N>0, {INPUT_CHANNELS}, H, W] input, got {:?}",
                x.dim()
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(SrwError::Validation(format!(
                "forward: spatial dims must be divisible by 16, got {h}x{w}"
            )));
        }
        let has_srw = !self.config.srw_stages.is_empty();
        match mode {
            ForwardMode::Train => {
                if has_srw && x_aug.is_none() {
                    return Err(SrwError::Validation(
                        "forward: train mode with SRW stages needs the transformed image".into(),
                    ));
                }
                if !has_srw && x_aug.is_some() {
                    return Err(SrwError::Validation(
                        "forward: no SRW stages configured, transformed image is unused".into(),
                    ));
                }
                if let Some(xa) = x_aug {
                    if xa.dim() != x.dim() {
                        return Err(SrwError::Validation(format!(
                            "forward: transformed batch {:?} does not match raw batch {:?}",
                            xa.dim(),
                            x.dim()
                        )));
                    }
                }
            }
            ForwardMode::Eval => {
                if x_aug.is_some() {
                    return Err(SrwError::Validation(
                        "forward: eval mode takes a single image batch".into(),
                    ));
                }
            }
        }

        let mut binding = Binding::new(self.params.len());
        let capture = mode == ForwardMode::Train;
        let x_var = g.constant(x.clone().into_dyn());
        let raw = self.encode(g, &mut binding, x_var, 4, capture)?;
        let aspp_out = self.aspp(g, &mut binding, raw.stage_outputs[3])?;
        let logits =
            self.decode(g, &mut binding, aspp_out, raw.stage_outputs[0], (h, w))?;

        let mut theta_aug = Vec::new();
        let mut snr_aug = Vec::new();
        if capture && has_srw {
            let deepest = self.config.max_srw_stage().expect("has_srw");
            let xa_var = g.constant(x_aug.expect("validated above").clone().into_dyn());
            let aug = self.encode(g, &mut binding, xa_var, deepest, true)?;
            theta_aug = aug.thetas;
            snr_aug = aug.snr_outputs;
        }

        Ok(ForwardArtifacts {
            logits,
            per_stage_snr: raw.snr_outputs,
            per_stage_snr_aug: snr_aug,
            per_stage_theta_raw: if capture { raw.thetas } else { Vec::new() },
            per_stage_theta_aug: theta_aug,
            binding,
        })
    }

    /// Argmax segmentation mask in eval mode; ties resolve to the lower
    /// class index.
    pub fn predict_mask(&self, x: &Array4<A>) -> Result<Array3<u8>> {
        let mut g = Graph::<A>::new();
        let artifacts = self.forward(&mut g, x, None, ForwardMode::Eval)?;
        let logits = g.value(artifacts.logits).view().into_dimensionality::<Ix4>().expect("rank 4");
        Ok(argmax_channels(&logits))
    }
}

/// Channel argmax with ties resolved to the lower index.
pub fn argmax_channels<A: Element>(logits: &ndarray::ArrayView4<'_, A>) -> Array3<u8> {
    let (n, k, h, w) = logits.dim();
    debug_assert!(k < 256);
    let mut out = Array3::<u8>::zeros((n, h, w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[(i, 0, y, x)];
                for ch in 1..k {
                    let v = logits[(i, ch, y, x)];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                out[(i, y, x)] = best as u8;
            }
        }
    }
    out
}
