//! Feature fusion strategies over two same-shape maps `X` and `Y`, where `Y`
//! is the map with the larger receptive field.

use std::fmt;

use rand::Rng;

use crate::attention::{check_reduction, AttentionParams, BranchScales};
use crate::autodiff::{ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    /// `X + Y`.
    Add,
    /// Point-wise projection of `concat(X, Y)` back to `C` channels, plus BN.
    Concat,
    /// `X + M(Y) ⊗ Y`.
    RefineMsSenet,
    /// `M(Y) ⊗ X + Y`.
    ModulateMsGau,
    /// `M(X) ⊗ X + (1 − M(X)) ⊗ Y`.
    SoftSelectHighway,
    /// `M(X + Y) ⊗ X + Y`.
    ModulateMsSa,
    /// `M(X + Y) ⊗ X + (1 − M(X + Y)) ⊗ Y`.
    Aff,
    /// AFF whose initial integration is itself an AFF stage.
    Iaff,
    /// AFF with `M = ½σ(ctx₀) + ½σ(ctx₁)`.
    HalfAff,
    /// AFF with `M = σ(PWConv(concat(ctx₀, ctx₁)))`.
    ConcatAff,
    /// AFF with `M = σ(W ⊗ ctx₀ + (1 − W) ⊗ ctx₁)`, `W` from a second MS-CAM.
    RecursiveAff,
}

impl FusionKind {
    pub const ALL: [FusionKind; 11] = [
        FusionKind::Add,
        FusionKind::Concat,
        FusionKind::RefineMsSenet,
        FusionKind::ModulateMsGau,
        FusionKind::SoftSelectHighway,
        FusionKind::ModulateMsSa,
        FusionKind::Aff,
        FusionKind::Iaff,
        FusionKind::HalfAff,
        FusionKind::ConcatAff,
        FusionKind::RecursiveAff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::RefineMsSenet => "refine_ms_senet",
            FusionKind::ModulateMsGau => "modulate_ms_gau",
            FusionKind::SoftSelectHighway => "soft_select_highway",
            FusionKind::ModulateMsSa => "modulate_ms_sa",
            FusionKind::Aff => "aff",
            FusionKind::Iaff => "iaff",
            FusionKind::HalfAff => "half_aff",
            FusionKind::ConcatAff => "concat_aff",
            FusionKind::RecursiveAff => "recursive_aff",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind `{name}`")))
    }

    /// Number of MS-CAM instances the kind owns.
    pub fn attention_count(self) -> usize {
        match self {
            FusionKind::Add | FusionKind::Concat => 0,
            FusionKind::Iaff | FusionKind::RecursiveAff => 2,
            _ => 1,
        }
    }

    pub fn is_attentional(self) -> bool {
        self.attention_count() > 0
    }

    /// Kinds whose weights on `X` and `Y` are `M` and `1 − M`.
    pub fn is_soft_selection(self) -> bool {
        matches!(
            self,
            FusionKind::SoftSelectHighway
                | FusionKind::Aff
                | FusionKind::Iaff
                | FusionKind::HalfAff
                | FusionKind::ConcatAff
                | FusionKind::RecursiveAff
        )
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initial integration `X ⊎ Y` fed to the attention module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integration {
    Sum,
    /// First AFF stage (used by iAFF).
    AffStage,
}

/// Values recorded by one fusion forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionTrace {
    pub out: Var,
    /// The attention map the kind computes (for soft-selection kinds, the
    /// weight applied to `X`).
    pub weights: Option<Var>,
    /// Weights actually multiplied onto `X` and `Y`, for soft-selection kinds.
    pub applied: Option<(Var, Var)>,
}

/// One fusion site: a kind plus its parameters.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub kind: FusionKind,
    pub channels: usize,
    pub attention: Vec<AttentionParams>,
    /// Point-wise `2C→C` projection (`concat`, `concat_aff`).
    pub projection: Option<Conv>,
    /// BN after the projection (`concat` only).
    pub projection_bn: Option<BatchNorm>,
}

impl Fusion {
    /// Parameters go under `{name}.mscam`, `{name}.mscam2` and `{name}.proj`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: FusionKind,
        channels: usize,
        r: usize,
        scales: BranchScales,
        rng: &mut R,
    ) -> Result<Self> {
        if kind.is_attentional() {
            check_reduction(channels, r)?;
        }
        let mut attention = Vec::new();
        for i in 0..kind.attention_count() {
            let suffix = if i == 0 { String::new() } else { format!("{}", i + 1) };
            attention.push(AttentionParams::new(store, &format!("{name}.mscam{suffix}"), channels, r, scales, rng)?);
        }
        let (projection, projection_bn) = match kind {
            FusionKind::Concat => (
                Some(Conv::new(store, &format!("{name}.proj"), 2 * channels, channels, 1, 1, false, rng)),
                Some(BatchNorm::new(store, &format!("{name}.proj_bn"), channels)),
            ),
            FusionKind::ConcatAff => (
                Some(Conv::new(store, &format!("{name}.mscam_proj"), 2 * channels, channels, 1, 1, true, rng)),
                None,
            ),
            _ => (None, None),
        };
        Ok(Fusion {
            kind,
            channels,
            attention,
            projection,
            projection_bn,
        })
    }

    pub fn set_identity_bn(&mut self, on: bool) {
        for a in &mut self.attention {
            a.identity_bn = on;
        }
    }

    /// Make every attention map of this site identically 0.5.
    pub fn zero_init(&self, store: &mut ParamStore) {
        // Zero contexts also zero the concat_aff projection input; its bias
        // starts at zero.
        for a in &self.attention {
            a.zero_init(store);
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, y: Var) -> Result<Var> {
        Ok(self.forward_traced(s, x, y)?.out)
    }

    pub fn forward_traced(&self, s: &mut Session, x: Var, y: Var) -> Result<FusionTrace> {
        let (xs, ys) = (s.tape.shape(x), s.tape.shape(y));
        if xs != ys {
            return Err(Error::dim(format!("fuse[{}]", self.kind), format!("X {xs} vs Y {ys}")));
        }
        if xs.c != self.channels {
            return Err(Error::dim(
                format!("fuse[{}]", self.kind),
                format!("inputs have {} channels, site built for {}", xs.c, self.channels),
            ));
        }
        let plain = |out| FusionTrace {
            out,
            weights: None,
            applied: None,
        };
        match self.kind {
            FusionKind::Add => Ok(plain(s.tape.add(x, y)?)),
            FusionKind::Concat => {
                let cat = s.tape.concat(x, y)?;
                let p = self.projection.as_ref().expect("concat projection").forward(s, cat)?;
                let out = self.projection_bn.as_ref().expect("concat bn").forward(s, p)?;
                Ok(plain(out))
            }
            FusionKind::RefineMsSenet => {
                let m = self.attention[0].weights(s, y)?;
                let my = s.tape.mul(m, y)?;
                Ok(FusionTrace {
                    out: s.tape.add(x, my)?,
                    weights: Some(m),
                    applied: None,
                })
            }
            FusionKind::ModulateMsGau => {
                let m = self.attention[0].weights(s, y)?;
                let mx = s.tape.mul(m, x)?;
                Ok(FusionTrace {
                    out: s.tape.add(mx, y)?,
                    weights: Some(m),
                    applied: None,
                })
            }
            FusionKind::SoftSelectHighway => {
                let m = self.attention[0].weights(s, x)?;
                soft_select(s, m, x, y)
            }
            FusionKind::ModulateMsSa => {
                let sum = s.tape.add(x, y)?;
                let m = self.attention[0].weights(s, sum)?;
                let mx = s.tape.mul(m, x)?;
                Ok(FusionTrace {
                    out: s.tape.add(mx, y)?,
                    weights: Some(m),
                    applied: None,
                })
            }
            FusionKind::Aff => {
                let sum = s.tape.add(x, y)?;
                let m = self.attention[0].weights(s, sum)?;
                soft_select(s, m, x, y)
            }
            FusionKind::Iaff => {
                let u = self.initial_integrate(s, x, y, Integration::AffStage)?;
                let m = self.attention[1].weights(s, u)?;
                soft_select(s, m, x, y)
            }
            FusionKind::HalfAff => {
                let sum = s.tape.add(x, y)?;
                let (a, b) = self.attention[0].contexts(s, sum)?;
                let (sa, sb) = (s.tape.sigmoid(a)?, s.tape.sigmoid(b)?);
                let ha = half(s, sa)?;
                let hb = half(s, sb)?;
                let m = s.tape.add(ha, hb)?;
                soft_select(s, m, x, y)
            }
            FusionKind::ConcatAff => {
                let sum = s.tape.add(x, y)?;
                let (a, b) = self.attention[0].contexts(s, sum)?;
                let (a, b) = (expand(s, a, xs)?, expand(s, b, xs)?);
                let cat = s.tape.concat(a, b)?;
                let logits = self.projection.as_ref().expect("concat_aff projection").forward(s, cat)?;
                let m = s.tape.sigmoid(logits)?;
                soft_select(s, m, x, y)
            }
            FusionKind::RecursiveAff => {
                // Interpretation of the nested-sigmoid wiring: an inner MS-CAM
                // over ctx₀ ⊕ ctx₁ soft-selects between the two contexts, and
                // the outer sigmoid turns the mix into the fusion weights.
                let sum = s.tape.add(x, y)?;
                let (a, b) = self.attention[0].contexts(s, sum)?;
                let (a, b) = (expand(s, a, xs)?, expand(s, b, xs)?);
                let ab = s.tape.add(a, b)?;
                let w = self.attention[1].weights(s, ab)?;
                let mixed = soft_select(s, w, a, b)?.out;
                let m = s.tape.sigmoid(mixed)?;
                soft_select(s, m, x, y)
            }
        }
    }

    /// `X ⊎ Y`: the plain sum, or the first AFF stage of iAFF (using the
    /// first attention instance).
    pub fn initial_integrate(&self, s: &mut Session, x: Var, y: Var, mode: Integration) -> Result<Var> {
        let sum = s.tape.add(x, y)?;
        match mode {
            Integration::Sum => Ok(sum),
            Integration::AffStage => {
                let att = self.attention.first().ok_or_else(|| {
                    Error::Unsupported(format!("fusion kind `{}` has no attention stage", self.kind))
                })?;
                let m = att.weights(s, sum)?;
                Ok(soft_select(s, m, x, y)?.out)
            }
        }
    }

    /// The attention map applied by this site.
    pub fn weight_map(&self, s: &mut Session, x: Var, y: Var) -> Result<Var> {
        if !self.kind.is_attentional() {
            return Err(Error::Unsupported(format!("fusion kind `{}` computes no attention weights", self.kind)));
        }
        Ok(self.forward_traced(s, x, y)?.weights.expect("attentional kinds record weights"))
    }
}

/// `M ⊗ X + (1 − M) ⊗ Y`.
fn soft_select(s: &mut Session, m: Var, x: Var, y: Var) -> Result<FusionTrace> {
    let inv = s.tape.one_minus(m)?;
    let mx = s.tape.mul(m, x)?;
    let iy = s.tape.mul(inv, y)?;
    Ok(FusionTrace {
        out: s.tape.add(mx, iy)?,
        weights: Some(m),
        applied: Some((m, inv)),
    })
}

fn half(s: &mut Session, v: Var) -> Result<Var> {
    let c = s.input(Tensor::full(s.tape.shape(v), 0.5));
    s.tape.mul(v, c)
}

/// Broadcast an `N×C×1×1` context to the full map shape.
fn expand(s: &mut Session, v: Var, shape: crate::tensor::Shape) -> Result<Var> {
    if s.tape.shape(v) == shape {
        return Ok(v);
    }
    let z = s.input(Tensor::zeros(shape));
    s.tape.add(z, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn site(kind: FusionKind, seed: u64) -> (ParamStore, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "f", kind, 8, 4, BranchScales::MS_CAM, &mut rng).unwrap();
        (store, f)
    }

    fn pair(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(2, 8, 3, 3);
        (Tensor::uniform(s, -1.0, 1.0, &mut rng), Tensor::uniform(s, -1.0, 1.0, &mut rng))
    }

    #[test]
    fn names_round_trip() {
        for k in FusionKind::ALL {
            assert_eq!(FusionKind::from_name(k.name()).unwrap(), k);
        }
        assert!(matches!(FusionKind::from_name("sum"), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let (x0, y0) = pair(1);
        for k in FusionKind::ALL {
            let (mut store, f) = site(k, 2);
            let mut s = Session::new(&mut store, Mode::Train);
            let (x, y) = (s.input(x0.clone()), s.input(y0.clone()));
            let z = f.forward(&mut s, x, y).unwrap();
            assert_eq!(s.tape.shape(z), x0.shape(), "{k}");
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let (mut store, f) = site(FusionKind::Aff, 3);
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(Tensor::zeros(Shape::new(1, 8, 4, 4)));
        let y = s.input(Tensor::zeros(Shape::new(1, 8, 2, 2)));
        assert!(matches!(f.forward(&mut s, x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_init_gives_half_blend_for_soft_selection() {
        let (x0, y0) = pair(4);
        let mut want = x0.clone();
        for (w, y) in want.data_mut().iter_mut().zip(y0.data()) {
            *w = 0.5 * *w + 0.5 * y;
        }
        for k in FusionKind::ALL.into_iter().filter(|k| k.is_soft_selection()) {
            let (mut store, f) = site(k, 5);
            f.zero_init(&mut store);
            let mut s = Session::new(&mut store, Mode::Train);
            let (x, y) = (s.input(x0.clone()), s.input(y0.clone()));
            let t = f.forward_traced(&mut s, x, y).unwrap();
            assert!(s.value(t.weights.unwrap()).data().iter().all(|&v| v == 0.5), "{k}");
            assert!(s.value(t.out).max_abs_diff(&want) < 1e-12, "{k}");
        }
    }

    #[test]
    fn aff_stage_matches_aff() {
        let (x0, y0) = pair(6);
        let (mut store, f) = site(FusionKind::Iaff, 7);
        let stage1 = Fusion {
            kind: FusionKind::Aff,
            channels: 8,
            attention: vec![f.attention[0].clone()],
            projection: None,
            projection_bn: None,
        };
        let mut s = Session::new(&mut store, Mode::Train);
        let (x, y) = (s.input(x0), s.input(y0));
        let u = f.initial_integrate(&mut s, x, y, Integration::AffStage).unwrap();
        let z = stage1.forward(&mut s, x, y).unwrap();
        assert_eq!(s.value(u), s.value(z));
    }

    #[test]
    fn sum_integration_of_negation_is_zero() {
        let (x0, _) = pair(8);
        let (mut store, f) = site(FusionKind::Add, 9);
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(x0.clone());
        let y = s.input(x0.map(|v| -v));
        let u = f.initial_integrate(&mut s, x, y, Integration::Sum).unwrap();
        assert!(s.value(u).data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            f.initial_integrate(&mut s, x, y, Integration::AffStage),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn weight_map_unsupported_for_plain_kinds() {
        let (x0, y0) = pair(10);
        for k in [FusionKind::Add, FusionKind::Concat] {
            let (mut store, f) = site(k, 11);
            let mut s = Session::new(&mut store, Mode::Eval);
            let (x, y) = (s.input(x0.clone()), s.input(y0.clone()));
            assert!(matches!(f.weight_map(&mut s, x, y), Err(Error::Unsupported(_))));
        }
    }
}
