//! Parameter and FLOPs accounting.
//!
//! FLOPs are `2 × MACs` throughout (one multiply plus one add). Convolutions
//! and fully connected layers are costed by their MACs; every other op
//! (BN, activations, pooling, elementwise) is costed at one MAC per output
//! element and reported under a separate `pointwise` category that the
//! overhead ratio ignores. Layers whose parameters live under an `mscam`
//! name scope count as attention.

use std::fmt::Write as _;

use serde_json::{json, Value};

use crate::autodiff::{Mode, OpKind, Session, Var};
use crate::error::Result;
use crate::network::Network;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Per module (stem, each block, heads), in build order.
    pub modules: Vec<(String, usize)>,
    pub attention: usize,
}

/// Group key of a parameter or layer path: `stage2.block1`, `topdown1`,
/// `lateral2`, `stem`, `fc`, …
pub fn module_of(path: &str) -> String {
    let mut parts = path.split('.');
    let first = parts.next().unwrap_or_default();
    if first.starts_with("stage") {
        if let Some(second) = parts.next() {
            return format!("{first}.{second}");
        }
    }
    first.to_string()
}

pub fn is_attention_path(path: &str) -> bool {
    path.split('.').any(|p| p.starts_with("mscam"))
}

/// Trainable scalars: kernels, biases, BN affine terms. Running statistics
/// are not parameters.
pub fn count_params(net: &Network) -> ParamCount {
    let mut modules: Vec<(String, usize)> = Vec::new();
    let mut attention = 0;
    for p in net.store.params().iter().filter(|p| p.trainable) {
        let n = p.value.numel();
        if is_attention_path(&p.name) {
            attention += n;
        }
        let m = module_of(&p.name);
        match modules.iter_mut().find(|(k, _)| *k == m) {
            Some((_, c)) => *c += n,
            None => modules.push((m, n)),
        }
    }
    ParamCount {
        total: modules.iter().map(|(_, c)| c).sum(),
        modules,
        attention,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostClass {
    /// Host convolution or FC layer.
    Host,
    /// Convolution inside an attention module.
    Attention,
    /// BN, activations, pooling, elementwise.
    Pointwise,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub kind: &'static str,
    pub macs: u64,
    pub flops: u64,
    pub class: CostClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub entries: Vec<LayerCost>,
    /// Conv/FC FLOPs per module.
    pub subtotals: Vec<(String, u64)>,
    pub host_flops: u64,
    pub attention_flops: u64,
    pub pointwise_flops: u64,
}

impl FlopsReport {
    /// Attention FLOPs over host conv/FC FLOPs, in percent.
    pub fn overhead_percent(&self) -> f64 {
        if self.host_flops == 0 {
            0.0
        } else {
            100.0 * self.attention_flops as f64 / self.host_flops as f64
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.host_flops + self.attention_flops + self.pointwise_flops
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<48} {:<22} {:>14} {:>14}", "layer", "kind", "macs", "flops");
        for e in self.entries.iter().filter(|e| e.class != CostClass::Pointwise) {
            let _ = writeln!(out, "{:<48} {:<22} {:>14} {:>14}", e.layer, e.kind, e.macs, e.flops);
        }
        let _ = writeln!(out);
        for (m, f) in &self.subtotals {
            let _ = writeln!(out, "subtotal {m:<39} {f:>52}");
        }
        let _ = writeln!(out, "host conv/fc flops    {:>14}", self.host_flops);
        let _ = writeln!(out, "attention flops       {:>14}", self.attention_flops);
        let _ = writeln!(out, "pointwise flops       {:>14}", self.pointwise_flops);
        let _ = writeln!(out, "overhead              {:>13.2}%", self.overhead_percent());
        out
    }

    pub fn to_json(&self) -> Value {
        let layers: Vec<Value> = self
            .entries
            .iter()
            .map(|e| {
                json!({
                    "layer": e.layer,
                    "kind": e.kind,
                    "macs": e.macs,
                    "flops": e.flops,
                    "class": match e.class {
                        CostClass::Host => "host",
                        CostClass::Attention => "attention",
                        CostClass::Pointwise => "pointwise",
                    },
                })
            })
            .collect();
        let subtotal: serde_json::Map<String, Value> =
            self.subtotals.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        json!({
            "layers": layers,
            "subtotal": subtotal,
            "host_flops": self.host_flops,
            "attention_flops": self.attention_flops,
            "pointwise_flops": self.pointwise_flops,
            "overhead_percent": (self.overhead_percent() * 100.0).round() / 100.0,
        })
    }
}

fn param_name(s: &Session, v: Var, suffix: &str) -> String {
    s.param_of(v)
        .map(|id| {
            let n = &s.store().get(id).name;
            n.strip_suffix(suffix).unwrap_or(n).to_string()
        })
        .unwrap_or_else(|| format!("node{}", v.index()))
}

/// Cost every op recorded on a session's tape.
pub fn flops_of_session(s: &Session) -> FlopsReport {
    let tape = &s.tape;
    let mut entries = Vec::new();
    for v in tape.vars() {
        let kind = tape.kind(v);
        let out = tape.shape(v);
        let (layer, macs, class) = match kind {
            OpKind::Leaf | OpKind::SoftmaxCrossEntropy => continue,
            OpKind::Conv2d => {
                let k = tape.shape(tape.inputs(v)[1]);
                let macs = (k.h * k.w * k.c * k.n * out.n * out.spatial()) as u64;
                let name = param_name(s, tape.inputs(v)[1], ".kernel");
                let class = if is_attention_path(&name) {
                    CostClass::Attention
                } else {
                    CostClass::Host
                };
                (name, macs, class)
            }
            OpKind::Linear => {
                let w = tape.shape(tape.inputs(v)[1]);
                let macs = (w.n * w.c * out.n) as u64;
                let name = param_name(s, tape.inputs(v)[1], ".weight");
                let class = if is_attention_path(&name) {
                    CostClass::Attention
                } else {
                    CostClass::Host
                };
                (name, macs, class)
            }
            OpKind::GlobalAvgPool => {
                let x = tape.shape(tape.inputs(v)[0]);
                (format!("{}#{}", kind.name(), v.index()), x.numel() as u64, CostClass::Pointwise)
            }
            _ => (format!("{}#{}", kind.name(), v.index()), out.numel() as u64, CostClass::Pointwise),
        };
        entries.push(LayerCost {
            layer,
            kind: kind.name(),
            macs,
            flops: 2 * macs,
            class,
        });
    }
    let mut subtotals: Vec<(String, u64)> = Vec::new();
    let (mut host, mut att, mut pw) = (0, 0, 0);
    for e in &entries {
        match e.class {
            CostClass::Host => host += e.flops,
            CostClass::Attention => att += e.flops,
            CostClass::Pointwise => {
                pw += e.flops;
                continue;
            }
        }
        let m = module_of(&e.layer);
        match subtotals.iter_mut().find(|(k, _)| *k == m) {
            Some((_, f)) => *f += e.flops,
            None => subtotals.push((m, e.flops)),
        }
    }
    FlopsReport {
        entries,
        subtotals,
        host_flops: host,
        attention_flops: att,
        pointwise_flops: pw,
    }
}

/// FLOPs of one eval-mode forward pass at `input` (use `N = 1` for
/// per-image costs).
pub fn count_flops(net: &Network, input: Shape) -> Result<FlopsReport> {
    let mut store = net.store.clone();
    let mut s = Session::new(&mut store, Mode::Eval);
    let x = s.input(Tensor::zeros(input));
    net.forward_on(&mut s, x, &mut Vec::new())?;
    Ok(flops_of_session(&s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

/// Attention PWConv FLOPs over block conv FLOPs, in percent, per unit
/// `C²HW` at the block output:
/// - basic, non-doubling: two 3×3 convs `C→C`, 36.
/// - basic, doubling: 3×3 `C/2→C` stride 2 (9) plus 3×3 `C→C` (18), 27.
/// - bottleneck (`C` = inner width, output `4C`): 52 non-doubling and 51
///   doubling, as tabulated in the cost model this reproduces.
///
/// The local attention branch on `Cₒ` output channels costs
/// `2 · 2 · Cₒ²/r` FLOPs per pixel (two point-wise layers).
pub fn overhead_ratio(kind: BlockKind, doubling: bool, r: usize) -> f64 {
    let r = r as f64;
    let (host, attention) = match kind {
        BlockKind::Basic => (if doubling { 27.0 } else { 36.0 }, 4.0 / r),
        BlockKind::Bottleneck => (if doubling { 51.0 } else { 52.0 }, 4.0 * 16.0 / r),
    };
    100.0 * attention / host
}

pub fn format_percent(p: f64) -> String {
    format!("{p:.2}%")
}

/// Attention maps dumped by `inspect`: mean, min, max per site.
pub fn summarize(t: &Tensor) -> (f64, f64, f64) {
    let d = t.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}
