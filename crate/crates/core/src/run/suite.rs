//! Finite-difference suites over the primitive ops, the attention variants,
//! every fusion kind and whole blocks, at small double-precision shapes.
//!
//! Units containing a global attention branch run with randomized running
//! statistics (eval mode). In train mode that branch normalizes two pooled
//! values per channel, which pins its output near ±γ; the remaining
//! derivatives are O(eps) and drown in finite-difference noise. Train-mode
//! batch norm is covered by the op units and by `*_train` units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, BranchScales};
use crate::autodiff::{grad_check_in, GradCheckReport, Mode, ParamStore, Session, Var};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::kernels::BN_EPS;
use crate::network::{InceptionBlock, Network, NetworkSpec, NetworkView, ResBlock, Scenario};
use crate::tensor::{Shape, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Attention,
    Fusion,
    Blocks,
    All,
}

impl Scope {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ops" => Ok(Scope::Ops),
            "attention" => Ok(Scope::Attention),
            "fusion" => Ok(Scope::Fusion),
            "blocks" => Ok(Scope::Blocks),
            "all" => Ok(Scope::All),
            _ => Err(Error::Config(format!(
                "unknown gradcheck scope `{name}` (ops, attention, fusion, blocks, all)"
            ))),
        }
    }

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

#[derive(Debug, Clone)]
pub struct UnitResult {
    pub scope: &'static str,
    pub unit: String,
    pub report: GradCheckReport,
}

impl UnitResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

type Build<'a> = Box<dyn FnMut(&mut Session, &[Var]) -> Result<Var> + 'a>;

/// Data stream independent of the projection `grad_check` draws from `seed`.
fn data_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))
}

fn rand(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn check(store: &mut ParamStore, inputs: &[Tensor], trials: usize, seed: u64, build: Build) -> Result<GradCheckReport> {
    grad_check_in(Mode::Train, store, inputs, trials, STEP, seed, build)
}

/// Eval mode with running statistics drawn away from the identity.
fn check_eval(store: &mut ParamStore, inputs: &[Tensor], trials: usize, seed: u64, build: Build) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157);
    for st in store.all_stats_mut() {
        for m in &mut st.mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut st.var {
            *v = rng.random_range(0.5..1.5);
        }
    }
    grad_check_in(Mode::Eval, store, inputs, trials, STEP, seed, build)
}

fn ops(seed: u64, out: &mut Vec<UnitResult>) -> Result<()> {
    let mut rng = data_rng(seed);
    let mut push = |unit: &str, report: GradCheckReport| {
        out.push(UnitResult {
            scope: "ops",
            unit: unit.to_string(),
            report,
        })
    };
    let mut none = ParamStore::new();
    let x = rand(Shape::new(1, 2, 3, 3), &mut rng);

    let k = rand(Shape::new(3, 2, 3, 3), &mut rng);
    let b = rand(Shape::new(1, 3, 1, 1), &mut rng);
    push(
        "conv2d",
        check(&mut none, &[x.clone(), k, b], 0, seed, Box::new(|s, v| s.tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)))?,
    );
    let k = rand(Shape::new(3, 2, 3, 3), &mut rng);
    push(
        "conv2d_stride2",
        check(&mut none, &[x.clone(), k], 0, seed, Box::new(|s, v| s.tape.conv2d(v[0], v[1], None, 2, 1)))?,
    );
    let k = rand(Shape::new(4, 2, 1, 1), &mut rng);
    push(
        "conv2d_pointwise",
        check(&mut none, &[x.clone(), k], 0, seed, Box::new(|s, v| s.tape.conv2d(v[0], v[1], None, 1, 0)))?,
    );

    let c2 = Shape::new(1, 2, 1, 1);
    let (g, be) = (rand(c2, &mut rng), rand(c2, &mut rng));
    push(
        "batch_norm",
        check(&mut none, &[x.clone(), g.clone(), be.clone()], 0, seed, Box::new(|s, v| {
            Ok(s.tape.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0)
        }))?,
    );
    let pooled = rand(Shape::new(2, 2, 1, 1), &mut rng);
    push(
        "batch_norm_pooled",
        check(&mut none, &[pooled.clone(), g.clone(), be.clone()], 0, seed, Box::new(|s, v| {
            Ok(s.tape.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0)
        }))?,
    );
    let (mean, var) = (vec![0.1, -0.2], vec![0.5, 1.5]);
    push(
        "batch_norm_eval",
        check(&mut none, &[x.clone(), g, be], 0, seed, Box::new(|s, v| {
            s.tape.batch_norm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS)
        }))?,
    );

    push("relu", check(&mut none, std::slice::from_ref(&x), 0, seed, Box::new(|s, v| s.tape.relu(v[0])))?);
    push(
        "sigmoid",
        check(&mut none, std::slice::from_ref(&x), 0, seed, Box::new(|s, v| s.tape.sigmoid(v[0])))?,
    );
    push(
        "global_avg_pool",
        check(&mut none, std::slice::from_ref(&x), 0, seed, Box::new(|s, v| s.tape.global_avg_pool(v[0])))?,
    );
    let y = rand(x.shape(), &mut rng);
    push(
        "broadcast_add",
        check(&mut none, &[x.clone(), y.clone()], 0, seed, Box::new(|s, v| s.tape.add(v[0], v[1])))?,
    );
    push(
        "broadcast_add_pooled",
        check(&mut none, &[x.clone(), pooled.slice_batch(0, 1)?], 0, seed, Box::new(|s, v| s.tape.add(v[0], v[1])))?,
    );
    push(
        "elementwise_mul",
        check(&mut none, &[x.clone(), y.clone()], 0, seed, Box::new(|s, v| s.tape.mul(v[0], v[1])))?,
    );
    push(
        "elementwise_mul_pooled",
        check(&mut none, &[pooled.slice_batch(1, 2)?, x.clone()], 0, seed, Box::new(|s, v| s.tape.mul(v[0], v[1])))?,
    );
    push(
        "one_minus",
        check(&mut none, std::slice::from_ref(&x), 0, seed, Box::new(|s, v| s.tape.one_minus(v[0])))?,
    );
    let z = rand(Shape::new(1, 3, 3, 3), &mut rng);
    push(
        "concat_channels",
        check(&mut none, &[x.clone(), z], 0, seed, Box::new(|s, v| s.tape.concat(v[0], v[1])))?,
    );
    push(
        "nearest_upsample2x",
        check(&mut none, std::slice::from_ref(&x), 0, seed, Box::new(|s, v| s.tape.upsample2x(v[0])))?,
    );
    let feat = rand(Shape::new(2, 5, 1, 1), &mut rng);
    let w = rand(Shape::new(4, 5, 1, 1), &mut rng);
    let bias = rand(Shape::new(1, 4, 1, 1), &mut rng);
    push(
        "fully_connected",
        check(&mut none, &[feat.clone(), w, bias], 0, seed, Box::new(|s, v| s.tape.linear(v[0], v[1], Some(v[2]))))?,
    );
    let logits = rand(Shape::new(2, 4, 1, 1), &mut rng);
    push(
        "softmax_cross_entropy",
        check(&mut none, &[logits], 0, seed, Box::new(|s, v| s.tape.softmax_cross_entropy(v[0], &[3, 1])))?,
    );
    let dense = rand(Shape::new(2, 3, 2, 2), &mut rng);
    let labels = [0, 1, 2, 2, 1, 0, 0, 2];
    push(
        "softmax_cross_entropy_dense",
        check(&mut none, &[dense], 0, seed, Box::new(|s, v| s.tape.softmax_cross_entropy(v[0], &labels)))?,
    );
    Ok(())
}

const C: usize = 8;
const R: usize = 4;

fn feature(rng: &mut ChaCha8Rng) -> Tensor {
    rand(Shape::new(2, C, 4, 4), rng)
}

fn attention(seed: u64, out: &mut Vec<UnitResult>) -> Result<()> {
    for scales in [BranchScales::MS_CAM, BranchScales::GLOBAL_GLOBAL, BranchScales::LOCAL_LOCAL] {
        let mut rng = data_rng(seed);
        let mut store = ParamStore::new();
        let att = AttentionParams::new(&mut store, "mscam", C, R, scales, &mut rng)?;
        let x = feature(&mut rng);
        let report = check_eval(&mut store, std::slice::from_ref(&x), 0, seed, Box::new(|s, v| att.weights(s, v[0])))?;
        out.push(UnitResult {
            scope: "attention",
            unit: scales.name().to_string(),
            report,
        });
        if !scales.has_global() {
            let report = check(&mut store, &[x], 0, seed, Box::new(|s, v| att.weights(s, v[0])))?;
            out.push(UnitResult {
                scope: "attention",
                unit: format!("{}_train", scales.name()),
                report,
            });
        }
    }
    Ok(())
}

fn fusion(seed: u64, out: &mut Vec<UnitResult>) -> Result<()> {
    for kind in FusionKind::ALL {
        let mut rng = data_rng(seed);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "fusion", kind, C, R, BranchScales::MS_CAM, &mut rng)?;
        let (x, y) = (feature(&mut rng), feature(&mut rng));
        let report = check_eval(&mut store, &[x, y], 0, seed, Box::new(|s, v| f.forward(s, v[0], v[1])))?;
        out.push(UnitResult {
            scope: "fusion",
            unit: kind.name().to_string(),
            report,
        });
    }
    Ok(())
}

const BLOCK_TRIALS: usize = 12;

fn blocks(seed: u64, out: &mut Vec<UnitResult>) -> Result<()> {
    let spec = NetworkSpec {
        base_channels: C,
        reduction: R,
        ..NetworkSpec::default()
    };
    let mut push = |unit: &str, report: GradCheckReport| {
        out.push(UnitResult {
            scope: "blocks",
            unit: unit.to_string(),
            report,
        })
    };

    for (unit, kind, in_c, stride) in [
        ("res_block_aff", FusionKind::Aff, C, 1),
        ("res_block_iaff_downsample", FusionKind::Iaff, C / 2, 2),
    ] {
        let mut rng = data_rng(seed);
        let mut store = ParamStore::new();
        let block = ResBlock::new(&mut store, "block", &spec, kind, in_c, C, stride, &mut rng)?;
        let x = rand(Shape::new(2, in_c, 4, 4), &mut rng);
        push(
            unit,
            check_eval(&mut store, &[x], BLOCK_TRIALS, seed, Box::new(|s, v| block.forward(s, v[0], &mut Vec::new())))?,
        );
    }

    let mut rng = data_rng(seed);
    let mut store = ParamStore::new();
    let block = ResBlock::new(&mut store, "block", &spec, FusionKind::Add, C, C, 1, &mut rng)?;
    let x = feature(&mut rng);
    push(
        "res_block_add_train",
        check(&mut store, &[x], BLOCK_TRIALS, seed, Box::new(|s, v| block.forward(s, v[0], &mut Vec::new())))?,
    );

    let mut rng = data_rng(seed);
    let mut store = ParamStore::new();
    let block = InceptionBlock::new(&mut store, "block", &spec, FusionKind::Aff, C, C, 1, &mut rng)?;
    let x = feature(&mut rng);
    push(
        "inception_block_aff",
        check_eval(&mut store, &[x], BLOCK_TRIALS, seed, Box::new(|s, v| block.forward(s, v[0], &mut Vec::new())))?,
    );

    for (unit, scenario, fusion) in [
        ("resnet_classifier_loss", Scenario::ShortSkip, FusionKind::Aff),
        ("fpn_segmenter_aff", Scenario::LongSkip, FusionKind::Aff),
    ] {
        let spec = NetworkSpec {
            scenario,
            fusion,
            base_channels: C,
            stages: 2,
            num_classes: 3,
            reduction: R,
            ..NetworkSpec::default()
        };
        let mut net = Network::build(&spec, seed)?;
        let mut rng = data_rng(seed);
        let x = rand(Shape::new(2, 3, 4, 4), &mut rng);
        let Network { spec, store, body } = &mut net;
        let view = NetworkView { spec, body };
        let classify = scenario == Scenario::ShortSkip;
        let report = check_eval(store, &[x], BLOCK_TRIALS, seed, Box::new(move |s, v| {
            let logits = view.forward(s, v[0], &mut Vec::new())?;
            if classify {
                s.tape.softmax_cross_entropy(logits, &[2, 0])
            } else {
                Ok(logits)
            }
        }))?;
        push(unit, report);
    }
    Ok(())
}

/// Run every unit in `scope`.
pub fn run_suite(scope: Scope, seed: u64) -> Result<Vec<UnitResult>> {
    let mut out = Vec::new();
    if scope.includes(Scope::Ops) {
        ops(seed, &mut out)?;
    }
    if scope.includes(Scope::Attention) {
        attention(seed, &mut out)?;
    }
    if scope.includes(Scope::Fusion) {
        fusion(seed, &mut out)?;
    }
    if scope.includes(Scope::Blocks) {
        blocks(seed, &mut out)?;
    }
    Ok(out)
}
