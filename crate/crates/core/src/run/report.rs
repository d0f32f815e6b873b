use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::checkpoint::write_blobs;
use super::config::{DatasetSource, RunConfig};
use super::train::{load_datasets, load_network};
use crate::analysis::{count_flops, count_params, format_percent, overhead_ratio, summarize, BlockKind, FlopsReport, ParamCount};
use crate::data::{make_batch, read_container, LabeledImage};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::network::Network;
use crate::tensor::{set_precision, Shape, Tensor};

fn input_side(cfg: &RunConfig) -> usize {
    match cfg.dataset {
        DatasetSource::Cifar => 32,
        _ => cfg.image_size,
    }
}

/// Costs of one network at one image.
#[derive(Debug, Clone)]
pub struct Costs {
    pub fusion: FusionKind,
    pub params: ParamCount,
    pub flops: FlopsReport,
}

fn costs(cfg: &RunConfig, fusion: FusionKind) -> Result<Costs> {
    let mut c = cfg.clone();
    c.fusion = fusion;
    let net = Network::build(&c.network_spec(c.num_classes())?, c.seed)?;
    let side = input_side(cfg);
    Ok(Costs {
        fusion,
        params: count_params(&net),
        flops: count_flops(&net, Shape::new(1, 3, side, side))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadRow {
    pub kind: BlockKind,
    pub doubling: bool,
    pub r: usize,
    pub percent: f64,
}

/// The configured network beside its add-fusion baseline, plus the
/// closed-form block overhead rows at the configured `r`.
#[derive(Debug, Clone)]
pub struct Report {
    pub configured: Costs,
    pub baseline: Costs,
    pub rows: Vec<OverheadRow>,
}

pub fn build_report(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let rows = [BlockKind::Basic, BlockKind::Bottleneck]
        .into_iter()
        .flat_map(|kind| {
            [true, false].map(|doubling| OverheadRow {
                kind,
                doubling,
                r: cfg.r,
                percent: overhead_ratio(kind, doubling, cfg.r),
            })
        })
        .collect();
    Ok(Report {
        configured: costs(cfg, cfg.fusion)?,
        baseline: costs(cfg, FusionKind::Add)?,
        rows,
    })
}

fn kind_name(k: BlockKind) -> &'static str {
    match k {
        BlockKind::Basic => "basic",
        BlockKind::Bottleneck => "bottleneck",
    }
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let (a, b) = (&self.configured, &self.baseline);
        let _ = writeln!(o, "{:<28} {:>16} {:>16}", "", a.fusion.name(), b.fusion.name());
        let _ = writeln!(o, "{:<28} {:>16} {:>16}", "parameters", a.params.total, b.params.total);
        let _ = writeln!(o, "{:<28} {:>16} {:>16}", "attention parameters", a.params.attention, b.params.attention);
        let _ = writeln!(o, "{:<28} {:>16} {:>16}", "host flops", a.flops.host_flops, b.flops.host_flops);
        let _ = writeln!(o, "{:<28} {:>16} {:>16}", "attention flops", a.flops.attention_flops, b.flops.attention_flops);
        let _ = writeln!(o, "{:<28} {:>16} {:>16}", "pointwise flops", a.flops.pointwise_flops, b.flops.pointwise_flops);
        let _ = writeln!(
            o,
            "{:<28} {:>16} {:>16}",
            "attention overhead",
            format_percent(a.flops.overhead_percent()),
            format_percent(b.flops.overhead_percent())
        );
        let ratio = a.params.total as f64 / b.params.total as f64;
        let _ = writeln!(o, "{:<28} {:>16.4}", "parameter ratio", ratio);
        let _ = writeln!(o);
        let _ = writeln!(o, "block overhead (closed form)");
        for r in &self.rows {
            let _ = writeln!(
                o,
                "  {:<11} {:<13} r={:<3} {:>8}",
                kind_name(r.kind),
                if r.doubling { "doubling" } else { "non-doubling" },
                r.r,
                format_percent(r.percent)
            );
        }
        let _ = writeln!(o);
        let _ = write!(o, "{}", a.flops.to_text());
        o
    }

    pub fn to_json(&self) -> Value {
        let side = |c: &Costs| {
            json!({
                "fusion": c.fusion.name(),
                "params": c.params.total,
                "attention_params": c.params.attention,
                "modules": c.params.modules.iter().map(|(k, v)| json!({"module": k, "params": v})).collect::<Vec<_>>(),
                "flops": c.flops.to_json(),
            })
        };
        json!({
            "configured": side(&self.configured),
            "baseline": side(&self.baseline),
            "param_ratio": self.configured.params.total as f64 / self.baseline.params.total as f64,
            "block_overhead": self.rows.iter().map(|r| json!({
                "block": kind_name(r.kind),
                "doubling": r.doubling,
                "r": r.r,
                "percent": format_percent(r.percent),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Network inventory printed by `--dry-run`: sites and parameter counts,
/// no forward pass.
pub fn inventory(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let spec = cfg.network_spec(cfg.num_classes())?;
    let net = Network::build(&spec, cfg.seed)?;
    let pc = count_params(&net);
    let mut o = String::new();
    let _ = writeln!(
        o,
        "network: {} fusion={} b={} stages={} base={} r={} branches={} policy={} classes={}",
        spec.scenario.name(),
        spec.fusion.name(),
        spec.b,
        spec.stages,
        spec.base_channels,
        spec.reduction,
        spec.branch_scales.name(),
        spec.policy.name(),
        spec.num_classes
    );
    let _ = writeln!(o, "fusion sites:");
    for site in spec.sites() {
        let _ = writeln!(o, "  {:<28} C={:<4} {}", site.path, site.channels, site.kind.name());
    }
    let _ = writeln!(o, "parameters by module:");
    for (m, n) in &pc.modules {
        let _ = writeln!(o, "  {m:<28} {n}");
    }
    let _ = writeln!(o, "total parameters: {} (attention {})", pc.total, pc.attention);
    Ok(o)
}

/// One fusion site's attention map with its summary.
#[derive(Debug, Clone)]
pub struct SiteMap {
    pub path: String,
    pub map: Tensor,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Eval-mode attention maps of every attentional site for the batch `x`.
pub fn inspect_weights(net: &mut Network, x: &Tensor) -> Result<Vec<SiteMap>> {
    if !net.spec.fusion.is_attentional() {
        return Err(Error::Unsupported(format!(
            "fusion `{}` has no attention weights to inspect",
            net.spec.fusion.name()
        )));
    }
    Ok(net
        .weight_maps(x)?
        .into_iter()
        .map(|(path, map)| {
            let (mean, min, max) = summarize(&map);
            SiteMap { path, map, mean, min, max }
        })
        .collect())
}

pub const WEIGHTS_FILE: &str = "weights.fsds";

/// Load a checkpoint, run the first `count` images of `input` (or of the
/// validation set) and dump the maps into `out/weights.fsds`.
pub fn run_inspect(cfg: &RunConfig, checkpoint: &Path, input: Option<&Path>, count: usize, out: &Path) -> Result<Vec<SiteMap>> {
    set_precision(cfg.precision);
    let (mut net, norm) = load_network(cfg, checkpoint)?;
    if !net.spec.fusion.is_attentional() {
        return Err(Error::Unsupported(format!(
            "fusion `{}` has no attention weights to inspect",
            net.spec.fusion.name()
        )));
    }
    let images: Vec<LabeledImage> = match input {
        Some(p) => read_container(p)?,
        None => load_datasets(cfg)?.val,
    };
    let refs: Vec<&LabeledImage> = images.iter().take(count.max(1)).collect();
    if refs.is_empty() {
        return Err(Error::Input("no images to inspect".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch(&refs, &norm, None, false, &mut rng)?;
    let maps = inspect_weights(&mut net, &batch.x)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let blobs: Vec<(String, Tensor)> = maps.iter().map(|m| (m.path.clone(), m.map.clone())).collect();
    write_blobs(&out.join(WEIGHTS_FILE), &blobs)?;
    Ok(maps)
}
