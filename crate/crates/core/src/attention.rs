//! Multi-scale channel attention (MS-CAM) and its single-scale variants.
//!
//! Both context branches share one bottleneck shape:
//! PWConv(C→C/r) → BN → ReLU → PWConv(C/r→C) → BN. A global branch applies
//! it to the GAP-pooled `N×C×1×1` map, a local branch to every pixel.
//! The attention weights are `σ(ctx₀ ⊕ ctx₁)` with broadcasting addition.

use std::fmt;

use rand::Rng;

use crate::autodiff::{ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextScale {
    Global,
    Local,
}

impl ContextScale {
    pub fn name(self) -> &'static str {
        match self {
            ContextScale::Global => "global",
            ContextScale::Local => "local",
        }
    }
}

impl fmt::Display for ContextScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which context each of the two branches aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BranchScales(pub ContextScale, pub ContextScale);

impl BranchScales {
    pub const MS_CAM: BranchScales = BranchScales(ContextScale::Global, ContextScale::Local);
    pub const GLOBAL_GLOBAL: BranchScales = BranchScales(ContextScale::Global, ContextScale::Global);
    pub const LOCAL_LOCAL: BranchScales = BranchScales(ContextScale::Local, ContextScale::Local);

    pub fn name(self) -> &'static str {
        match (self.0, self.1) {
            (ContextScale::Global, ContextScale::Local) | (ContextScale::Local, ContextScale::Global) => "global_local",
            (ContextScale::Global, ContextScale::Global) => "global_global",
            (ContextScale::Local, ContextScale::Local) => "local_local",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "global_local" | "ms_cam" => Some(Self::MS_CAM),
            "global_global" => Some(Self::GLOBAL_GLOBAL),
            "local_local" => Some(Self::LOCAL_LOCAL),
            _ => None,
        }
    }

    /// True when the weights are a broadcast `N×C×1×1` map.
    pub fn is_global_only(self) -> bool {
        self == Self::GLOBAL_GLOBAL
    }

    pub fn has_global(self) -> bool {
        self.0 == ContextScale::Global || self.1 == ContextScale::Global
    }
}

/// PWConv(C→C/r) → BN → ReLU → PWConv(C/r→C) → BN.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub pw1: Conv,
    pub bn1: BatchNorm,
    pub pw2: Conv,
    pub bn2: BatchNorm,
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, r: usize, rng: &mut R) -> Self {
        Bottleneck {
            pw1: Conv::new(store, &format!("{name}.pw1"), c, c / r, 1, 1, false, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c / r),
            pw2: Conv::new(store, &format!("{name}.pw2"), c / r, c, 1, 1, false, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c),
        }
    }

    fn forward(&self, s: &mut Session, x: Var, identity_bn: bool) -> Result<Var> {
        let mut h = self.pw1.forward(s, x)?;
        if !identity_bn {
            h = self.bn1.forward(s, h)?;
        }
        h = s.tape.relu(h)?;
        h = self.pw2.forward(s, h)?;
        if !identity_bn {
            h = self.bn2.forward(s, h)?;
        }
        Ok(h)
    }
}

/// Weights of one MS-CAM instance.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub channels: usize,
    pub reduction: usize,
    pub scales: BranchScales,
    pub branches: [Bottleneck; 2],
    /// Skip every BN layer (diagnostic mode used by oracles).
    pub identity_bn: bool,
}

pub fn check_reduction(channels: usize, r: usize) -> Result<()> {
    if r == 0 || channels == 0 || channels % r != 0 {
        return Err(Error::Config(format!(
            "channel count {channels} must be a positive multiple of the reduction ratio {r}"
        )));
    }
    Ok(())
}

impl AttentionParams {
    /// Parameters are registered under `{name}.{scale}{i}.…`, e.g.
    /// `fusion.mscam.global0.pw1.kernel`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        r: usize,
        scales: BranchScales,
        rng: &mut R,
    ) -> Result<Self> {
        check_reduction(channels, r)?;
        let b0 = Bottleneck::new(store, &format!("{name}.{}0", scales.0), channels, r, rng);
        let b1 = Bottleneck::new(store, &format!("{name}.{}1", scales.1), channels, r, rng);
        Ok(AttentionParams {
            channels,
            reduction: r,
            scales,
            branches: [b0, b1],
            identity_bn: false,
        })
    }

    fn check_input(&self, s: &Session, x: Var) -> Result<()> {
        let c = s.tape.shape(x).c;
        if c != self.channels {
            return Err(Error::dim(
                "ms_cam",
                format!("input {} has {c} channels, module expects {}", s.tape.shape(x), self.channels),
            ));
        }
        Ok(())
    }

    fn context(&self, s: &mut Session, branch: usize, scale: ContextScale, x: Var) -> Result<Var> {
        self.check_input(s, x)?;
        let input = match scale {
            ContextScale::Global => s.tape.global_avg_pool(x)?,
            ContextScale::Local => x,
        };
        self.branches[branch].forward(s, input, self.identity_bn)
    }

    /// Global context of the first branch: bottleneck over GAP, pre-sigmoid.
    pub fn global_channel_context(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.context(s, 0, ContextScale::Global, x)
    }

    /// Local context of the second branch: per-pixel bottleneck, pre-sigmoid.
    pub fn local_channel_context(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.context(s, 1, ContextScale::Local, x)
    }

    /// The two branch contexts according to `scales`.
    pub fn contexts(&self, s: &mut Session, x: Var) -> Result<(Var, Var)> {
        let a = self.context(s, 0, self.scales.0, x)?;
        let b = self.context(s, 1, self.scales.1, x)?;
        Ok((a, b))
    }

    /// `M(X) = σ(ctx₀(X) ⊕ ctx₁(X))`.
    pub fn weights(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (a, b) = self.contexts(s, x)?;
        let sum = s.tape.add(a, b)?;
        s.tape.sigmoid(sum)
    }

    /// `X ⊗ M(X)`.
    pub fn refine(&self, s: &mut Session, x: Var) -> Result<Var> {
        let m = self.weights(s, x)?;
        s.tape.mul(x, m)
    }

    /// Make both contexts identically zero so that `M ≡ 0.5`: the final BN
    /// scale is zeroed (and the last kernel too when BN is bypassed).
    pub fn zero_init(&self, store: &mut ParamStore) {
        for b in &self.branches {
            let g = store.get_mut(b.bn2.gamma);
            g.value = Tensor::zeros(g.value.shape());
            if self.identity_bn {
                let k = store.get_mut(b.pw2.kernel);
                k.value = Tensor::zeros(k.value.shape());
            }
        }
    }
}

/// `X ⊗ M` for externally supplied weights.
pub fn refine_with(s: &mut Session, x: Var, m: Var) -> Result<Var> {
    s.tape.mul(x, m)
}
