//! Host networks with a pluggable fusion site: ResNet-style short-skip
//! blocks, two-branch (3×3 / 5×5) same-layer blocks, and an FPN-style
//! segmenter with long-skip top-down fusion.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::BranchScales;
use crate::autodiff::{Mode, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::nn::{Conv, ConvBn, Linear};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Two parallel branches of one layer (3×3 and 5×5) fused.
    SameLayer,
    /// Identity shortcut fused with the residual.
    ShortSkip,
    /// Low-level lateral fused with the upsampled high-level map.
    LongSkip,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::SameLayer => "same_layer",
            Scenario::ShortSkip => "short_skip",
            Scenario::LongSkip => "long_skip",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "same_layer" => Ok(Scenario::SameLayer),
            "short_skip" => Ok(Scenario::ShortSkip),
            "long_skip" => Ok(Scenario::LongSkip),
            _ => Err(Error::Config(format!("unknown scenario `{name}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which fusion sites use the configured (attentional) kind; the others use `add`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    All,
    LastTwoStages,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::All => "all",
            Policy::LastTwoStages => "last_two_stages",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "all" => Ok(Policy::All),
            "last_two_stages" => Ok(Policy::LastTwoStages),
            _ => Err(Error::Config(format!("unknown replacement policy `{name}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub scenario: Scenario,
    /// Blocks per stage.
    pub b: usize,
    pub base_channels: usize,
    /// Stage `i` has `base_channels << i` channels; stages after the first
    /// halve the resolution.
    pub stages: usize,
    pub in_channels: usize,
    pub fusion: FusionKind,
    pub reduction: usize,
    pub num_classes: usize,
    pub policy: Policy,
    pub branch_scales: BranchScales,
    /// Start every attention map at exactly 0.5.
    pub zero_attention: bool,
    /// Zero the classifier weights.
    pub zero_head: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            scenario: Scenario::ShortSkip,
            b: 1,
            base_channels: 16,
            stages: 3,
            in_channels: 3,
            fusion: FusionKind::Aff,
            reduction: 4,
            num_classes: 20,
            policy: Policy::All,
            branch_scales: BranchScales::MS_CAM,
            zero_attention: false,
            zero_head: false,
        }
    }
}

/// One fusion site in a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteInfo {
    pub path: String,
    pub stage: usize,
    pub block: usize,
    pub channels: usize,
    pub kind: FusionKind,
    pub attentional: bool,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::Config("b must be positive".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("stages must be positive".into()));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.fusion.is_attentional() {
            for site in self.sites() {
                if site.attentional {
                    crate::attention::check_reduction(site.channels, self.reduction)
                        .map_err(|e| Error::Config(format!("{}: {e}", site.path)))?;
                }
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn kind_for_stage(&self, stage: usize) -> FusionKind {
        match self.policy {
            Policy::LastTwoStages if stage + 2 < self.stages => FusionKind::Add,
            _ => self.fusion,
        }
    }

    /// Inventory of every fusion site.
    pub fn sites(&self) -> Vec<SiteInfo> {
        let mut out = Vec::new();
        match self.scenario {
            Scenario::ShortSkip | Scenario::SameLayer => {
                for stage in 0..self.stages {
                    let kind = self.kind_for_stage(stage);
                    for block in 0..self.b {
                        out.push(SiteInfo {
                            path: format!("stage{}.block{}.fusion", stage + 1, block + 1),
                            stage: stage + 1,
                            block: block + 1,
                            channels: self.stage_channels(stage),
                            kind,
                            attentional: kind.is_attentional(),
                        });
                    }
                }
            }
            Scenario::LongSkip => {
                let top = self.stage_channels(self.stages - 1);
                for level in (0..self.stages - 1).rev() {
                    let kind = self.kind_for_stage(level);
                    out.push(SiteInfo {
                        path: format!("topdown{}.fusion", level + 1),
                        stage: level + 1,
                        block: 1,
                        channels: top,
                        kind,
                        attentional: kind.is_attentional(),
                    });
                }
            }
        }
        out
    }

    /// Convolution layers on the main path of a classifier:
    /// stem + 2 per block + head (counted as a layer).
    pub fn depth(&self) -> usize {
        2 * self.b * self.stages + 2
    }
}

/// Collected attention maps, one per attentional fusion site.
pub type SiteWeights = Vec<(String, Var)>;

fn fusion_site<R: Rng + ?Sized>(
    store: &mut ParamStore,
    spec: &NetworkSpec,
    path: &str,
    kind: FusionKind,
    channels: usize,
    rng: &mut R,
) -> Result<Fusion> {
    let f = Fusion::new(store, path, kind, channels, spec.reduction, spec.branch_scales, rng)
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{path}: {m}")),
            other => other,
        })?;
    if spec.zero_attention {
        f.zero_init(store);
    }
    Ok(f)
}

/// Basic residual block: `ReLU(fuse(X = shortcut, Y = residual))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub path: String,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    /// 1×1 projection when channels or resolution change.
    pub shortcut: Option<ConvBn>,
    pub fusion: Fusion,
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("block stride must be 1 or 2, got {stride}")))
    }
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        spec: &NetworkSpec,
        kind: FusionKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_stride(stride)?;
        let conv1 = ConvBn::new(store, &format!("{path}.conv1"), in_c, out_c, 3, stride, rng);
        let conv2 = ConvBn::new(store, &format!("{path}.conv2"), out_c, out_c, 3, 1, rng);
        let shortcut =
            (stride != 1 || in_c != out_c).then(|| ConvBn::new(store, &format!("{path}.shortcut"), in_c, out_c, 1, stride, rng));
        let fusion = fusion_site(store, spec, &format!("{path}.fusion"), kind, out_c, rng)?;
        Ok(ResBlock {
            path: path.to_string(),
            conv1,
            conv2,
            shortcut,
            fusion,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, trace: &mut SiteWeights) -> Result<Var> {
        let run = |s: &mut Session, trace: &mut SiteWeights| -> Result<Var> {
            let h = self.conv1.forward_relu(s, x)?;
            let y = self.conv2.forward(s, h)?;
            let sc = match &self.shortcut {
                Some(p) => p.forward(s, x)?,
                None => x,
            };
            let t = self.fusion.forward_traced(s, sc, y)?;
            if let Some(m) = t.weights {
                trace.push((self.fusion_path(), m));
            }
            s.tape.relu(t.out)
        };
        run(s, trace).map_err(|e| e.at(&self.path))
    }

    fn fusion_path(&self) -> String {
        format!("{}.fusion", self.path)
    }
}

/// Two-branch block: a 3×3 conv feeds parallel 3×3 and 5×5 branches whose
/// outputs are fused; the result is added to the shortcut.
#[derive(Debug, Clone)]
pub struct InceptionBlock {
    pub path: String,
    pub conv_in: ConvBn,
    pub branch3: ConvBn,
    pub branch5: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub fusion: Fusion,
}

impl InceptionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        spec: &NetworkSpec,
        kind: FusionKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_stride(stride)?;
        let conv_in = ConvBn::new(store, &format!("{path}.conv_in"), in_c, out_c, 3, stride, rng);
        let branch3 = ConvBn::new(store, &format!("{path}.branch3"), out_c, out_c, 3, 1, rng);
        let branch5 = ConvBn::new(store, &format!("{path}.branch5"), out_c, out_c, 5, 1, rng);
        let shortcut =
            (stride != 1 || in_c != out_c).then(|| ConvBn::new(store, &format!("{path}.shortcut"), in_c, out_c, 1, stride, rng));
        let fusion = fusion_site(store, spec, &format!("{path}.fusion"), kind, out_c, rng)?;
        Ok(InceptionBlock {
            path: path.to_string(),
            conv_in,
            branch3,
            branch5,
            shortcut,
            fusion,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, trace: &mut SiteWeights) -> Result<Var> {
        let run = |s: &mut Session, trace: &mut SiteWeights| -> Result<Var> {
            let h = self.conv_in.forward_relu(s, x)?;
            let bx = self.branch3.forward_relu(s, h)?;
            let by = self.branch5.forward_relu(s, h)?;
            let t = self.fusion.forward_traced(s, bx, by)?;
            if let Some(m) = t.weights {
                trace.push((format!("{}.fusion", self.path), m));
            }
            let sc = match &self.shortcut {
                Some(p) => p.forward(s, x)?,
                None => x,
            };
            let sum = s.tape.add(sc, t.out)?;
            s.tape.relu(sum)
        };
        run(s, trace).map_err(|e| e.at(&self.path))
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Res(ResBlock),
    Inception(InceptionBlock),
}

impl Block {
    pub fn forward(&self, s: &mut Session, x: Var, trace: &mut SiteWeights) -> Result<Var> {
        match self {
            Block::Res(b) => b.forward(s, x, trace),
            Block::Inception(b) => b.forward(s, x, trace),
        }
    }

    pub fn fusion(&self) -> &Fusion {
        match self {
            Block::Res(b) => &b.fusion,
            Block::Inception(b) => &b.fusion,
        }
    }
}

/// Stem conv → stages of blocks → GAP → FC.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub stem: ConvBn,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// Backbone of add-fusion residual blocks with a top-down fusion path and a
/// per-pixel 1×1 head at the finest level.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub stem: ConvBn,
    /// `stages[i]` holds the blocks of stage `i`.
    pub stages: Vec<Vec<ResBlock>>,
    /// 1×1 conv + BN projecting stage `i` to the top channel count, for
    /// every stage but the last.
    pub laterals: Vec<ConvBn>,
    /// `topdown[i]` fuses level `i` with the upsampled level `i + 1`.
    pub topdown: Vec<Fusion>,
    pub head: Conv,
}

#[derive(Debug, Clone)]
pub enum Body {
    Classifier(Classifier),
    Segmenter(Segmenter),
}

fn build_stages<R: Rng + ?Sized>(
    store: &mut ParamStore,
    spec: &NetworkSpec,
    rng: &mut R,
    mut make: impl FnMut(&mut ParamStore, &str, FusionKind, usize, usize, usize, &mut R) -> Result<Block>,
) -> Result<Vec<Vec<Block>>> {
    let mut stages = Vec::new();
    let mut in_c = spec.base_channels;
    for stage in 0..spec.stages {
        let out_c = spec.stage_channels(stage);
        let kind = spec.kind_for_stage(stage);
        let mut blocks = Vec::new();
        for block in 0..spec.b {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let path = format!("stage{}.block{}", stage + 1, block + 1);
            blocks.push(make(store, &path, kind, in_c, out_c, stride, rng)?);
            in_c = out_c;
        }
        stages.push(blocks);
    }
    Ok(stages)
}

/// A built network: spec, parameters and structure.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub store: ParamStore,
    pub body: Body,
}

impl Network {
    /// Deterministic in `(spec, seed)`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = ConvBn::new(&mut store, "stem", spec.in_channels, spec.base_channels, 3, 1, &mut rng);
        let top = spec.stage_channels(spec.stages - 1);
        let body = match spec.scenario {
            Scenario::ShortSkip | Scenario::SameLayer => {
                let inception = spec.scenario == Scenario::SameLayer;
                let stages = build_stages(&mut store, spec, &mut rng, |st, path, kind, i, o, stride, rng| {
                    Ok(if inception {
                        Block::Inception(InceptionBlock::new(st, path, spec, kind, i, o, stride, rng)?)
                    } else {
                        Block::Res(ResBlock::new(st, path, spec, kind, i, o, stride, rng)?)
                    })
                })?;
                let head = Linear::new(&mut store, "fc", top, spec.num_classes, spec.zero_head, &mut rng);
                Body::Classifier(Classifier {
                    stem,
                    blocks: stages.into_iter().flatten().collect(),
                    head,
                })
            }
            Scenario::LongSkip => {
                let backbone = NetworkSpec {
                    fusion: FusionKind::Add,
                    ..spec.clone()
                };
                let stages = build_stages(&mut store, &backbone, &mut rng, |st, path, kind, i, o, stride, rng| {
                    Ok(Block::Res(ResBlock::new(st, path, &backbone, kind, i, o, stride, rng)?))
                })?
                .into_iter()
                .map(|blocks| {
                    blocks
                        .into_iter()
                        .map(|b| match b {
                            Block::Res(r) => r,
                            Block::Inception(_) => unreachable!(),
                        })
                        .collect()
                })
                .collect();
                let mut laterals = Vec::new();
                let mut topdown = Vec::new();
                for level in 0..spec.stages - 1 {
                    let c = spec.stage_channels(level);
                    laterals.push(ConvBn::new(&mut store, &format!("lateral{}", level + 1), c, top, 1, 1, &mut rng));
                    let path = format!("topdown{}.fusion", level + 1);
                    topdown.push(fusion_site(&mut store, spec, &path, spec.kind_for_stage(level), top, &mut rng)?);
                }
                let head = Conv::new(&mut store, "head", top, spec.num_classes, 1, 1, true, &mut rng);
                if spec.zero_head {
                    let k = store.get_mut(head.kernel);
                    k.value = Tensor::zeros(k.value.shape());
                }
                Body::Segmenter(Segmenter {
                    stem,
                    stages,
                    laterals,
                    topdown,
                    head,
                })
            }
        };
        Ok(Network {
            spec: spec.clone(),
            store,
            body,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        self.view().check_input(s)
    }

    /// Record the forward pass on `s` (whose store must be this network's
    /// store or a clone of it).
    pub fn forward_on(&self, s: &mut Session, x: Var, trace: &mut SiteWeights) -> Result<Var> {
        self.view().forward(s, x, trace)
    }

    /// Forward pass returning logits (`N×K×1×1` for the classifier,
    /// `N×K×H×W` for the segmenter).
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let view = NetworkView {
            spec: &self.spec,
            body: &self.body,
        };
        let mut s = Session::new(&mut self.store, mode);
        let xv = s.input(x.clone());
        let out = view.forward(&mut s, xv, &mut Vec::new())?;
        Ok(s.value(out).clone())
    }

    /// Mean cross-entropy of one training batch; gradients are accumulated
    /// into the store (zeroed first).
    pub fn train_batch(&mut self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        self.store.zero_grads();
        let view = NetworkView {
            spec: &self.spec,
            body: &self.body,
        };
        let mut s = Session::new(&mut self.store, Mode::Train);
        let xv = s.input(x.clone());
        let logits = view.forward(&mut s, xv, &mut Vec::new())?;
        let loss = s.tape.softmax_cross_entropy(logits, labels)?;
        let value = s.value(loss).data()[0];
        s.backward_scalar(loss)?;
        Ok(value)
    }

    /// Eval-mode attention maps of every attentional site.
    pub fn weight_maps(&mut self, x: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let view = NetworkView {
            spec: &self.spec,
            body: &self.body,
        };
        let mut s = Session::new(&mut self.store, Mode::Eval);
        let xv = s.input(x.clone());
        let mut trace = Vec::new();
        view.forward(&mut s, xv, &mut trace)?;
        Ok(trace.into_iter().map(|(p, v)| (p, s.value(v).clone())).collect())
    }

    pub fn view(&self) -> NetworkView<'_> {
        NetworkView {
            spec: &self.spec,
            body: &self.body,
        }
    }
}

/// Borrow of a network's structure without its parameters, so a session can
/// hold the store mutably while the forward pass reads the layers.
#[derive(Clone, Copy)]
pub struct NetworkView<'a> {
    pub spec: &'a NetworkSpec,
    pub body: &'a Body,
}

impl NetworkView<'_> {
    pub fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.spec.in_channels {
            return Err(Error::dim(
                "input",
                format!("batch {s} has {} channels, network expects {}", s.c, self.spec.in_channels),
            ));
        }
        if self.spec.scenario == Scenario::LongSkip {
            let f = 1usize << (self.spec.stages - 1);
            if s.h % f != 0 || s.w % f != 0 {
                return Err(Error::Config(format!("segmenter input {}×{} must be divisible by {f}", s.h, s.w)));
            }
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, x: Var, trace: &mut SiteWeights) -> Result<Var> {
        self.check_input(s.tape.shape(x))?;
        match self.body {
            Body::Classifier(c) => {
                let mut h = c.stem.forward_relu(s, x).map_err(|e| e.at("stem"))?;
                for b in &c.blocks {
                    h = b.forward(s, h, trace)?;
                }
                let p = s.tape.global_avg_pool(h)?;
                c.head.forward(s, p).map_err(|e| e.at("fc"))
            }
            Body::Segmenter(g) => {
                let mut h = g.stem.forward_relu(s, x).map_err(|e| e.at("stem"))?;
                let mut levels = Vec::new();
                for blocks in &g.stages {
                    for b in blocks {
                        h = b.forward(s, h, trace)?;
                    }
                    levels.push(h);
                }
                let mut p = *levels.last().expect("at least one stage");
                for level in (0..g.laterals.len()).rev() {
                    let path = format!("topdown{}", level + 1);
                    let lat = g.laterals[level].forward(s, levels[level]).map_err(|e| e.at(&path))?;
                    let up = s.tape.upsample2x(p)?;
                    let t = g.topdown[level].forward_traced(s, lat, up).map_err(|e| e.at(&path))?;
                    if let Some(m) = t.weights {
                        trace.push((format!("{path}.fusion"), m));
                    }
                    p = t.out;
                }
                g.head.forward(s, p).map_err(|e| e.at("head"))
            }
        }
    }
}
