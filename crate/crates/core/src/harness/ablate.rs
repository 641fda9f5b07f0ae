//! Train a grid of configuration variants under one seed and budget and
//! compare them.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::eval::{ApInterpolation, EvalReport};
use crate::harness::sampling::{sampling_stats, SamplingStats};
use crate::harness::scene::Scene;
use crate::harness::train::{eval_scenes, evaluate_model, train, train_scenes};

/// Keys a variant may override.
pub const GRID_KEYS: [&str; 7] = ["dab", "rs", "fa", "ps", "alpha", "n_queries", "label_assign"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(label: &str, overrides: &[(&str, &str)]) -> Self {
        Variant {
            label: label.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// `label: key=value, key=value`; without a label the overrides name the row.
    pub fn parse(spec: &str) -> Result<Self> {
        let (label, body) = match spec.split_once(':') {
            Some((l, b)) => (Some(l.trim()), b),
            None => (None, spec),
        };
        let mut overrides = Vec::new();
        for item in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid entry {item:?}: expected key=value")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let label = match label {
            Some(l) if !l.is_empty() => l.to_string(),
            _ if overrides.is_empty() => "base".to_string(),
            _ => body.trim().to_string(),
        };
        let v = Variant { label, overrides };
        v.check_keys()?;
        Ok(v)
    }

    fn check_keys(&self) -> Result<()> {
        match self.overrides.iter().find(|(k, _)| !GRID_KEYS.contains(&k.as_str())) {
            Some((k, _)) => Err(Error::Config(format!(
                "ablation key {k:?} not in {}",
                GRID_KEYS.join(", ")
            ))),
            None => Ok(()),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        self.check_keys()?;
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One variant per non-empty, non-comment line.
pub fn parse_grid(text: &str) -> Result<Vec<Variant>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(Variant::parse)
        .collect()
}

fn flags(label: &str, dab: bool, rs: bool, fa: bool, ps: bool) -> Variant {
    let b = |x: bool| if x { "true" } else { "false" };
    Variant::new(label, &[("dab", b(dab)), ("rs", b(rs)), ("fa", b(fa)), ("ps", b(ps))])
}

/// The eight DAB/RS/FA/PS module combinations, baseline first.
pub fn module_grid() -> Vec<Variant> {
    vec![
        flags("baseline", false, false, false, false),
        flags("dab", true, false, false, false),
        flags("rs", false, true, false, false),
        flags("dab+rs", true, true, false, false),
        flags("dab+fa", true, false, true, false),
        flags("dab+rs+fa", true, true, true, false),
        flags("dab+ps", true, false, false, true),
        flags("full", true, true, true, true),
    ]
}

pub fn alpha_grid() -> Vec<Variant> {
    ["1", "2", "4", "inf"]
        .iter()
        .map(|a| Variant::new(&format!("alpha={a}"), &[("alpha", a)]))
        .collect()
}

pub fn query_grid(counts: &[usize]) -> Vec<Variant> {
    counts
        .iter()
        .map(|n| Variant {
            label: format!("n_queries={n}"),
            overrides: vec![("n_queries".into(), n.to_string())],
        })
        .collect()
}

/// Named grid: `modules`, `alpha` or `queries`.
pub fn named_grid(name: &str) -> Result<Vec<Variant>> {
    match name {
        "modules" => Ok(module_grid()),
        "alpha" => Ok(alpha_grid()),
        "queries" => Ok(query_grid(&[10, 20, 30, 50])),
        _ => Err(Error::Config(format!("unknown grid {name:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub overrides: Vec<(String, String)>,
    pub report: EvalReport,
    pub sampling: SamplingStats,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Train and evaluate one variant on prepared data.
pub fn run_variant(
    base: &RunConfig,
    variant: &Variant,
    train_data: &[Scene],
    eval_data: &[Scene],
    interp: ApInterpolation,
) -> Result<AblationRow> {
    let cfg = variant.apply(base)?;
    let start = Instant::now();
    let mut final_loss = f64::NAN;
    let model = train(&cfg, train_data, |r| {
        final_loss = r.loss;
        Ok(())
    })?;
    let report = evaluate_model(&model, eval_data, interp)?;
    let sampling = sampling_stats(&model, eval_data)?;
    let seconds = start.elapsed().as_secs_f64();
    info!("{}: AP50 {:.3} ({seconds:.0}s)", variant.label, report.ap50);
    Ok(AblationRow {
        label: variant.label.clone(),
        overrides: variant.overrides.clone(),
        report,
        sampling,
        final_loss,
        seconds,
    })
}

/// Every variant trained from the base seed on the same scenes, rows in
/// grid order.
pub fn run_ablation(base: &RunConfig, grid: &[Variant], interp: ApInterpolation) -> Result<Vec<AblationRow>> {
    for v in grid {
        v.check_keys()?;
    }
    base.validate()?;
    let train_data = train_scenes(base)?;
    let eval_data = eval_scenes(base)?;
    grid.iter()
        .map(|v| run_variant(base, v, &train_data, &eval_data, interp))
        .collect()
}

pub fn markdown_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| variant | AP50 | AP75 | AP50:95 | in anchor | in target | final loss |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.3} | {:.4} |",
            r.label,
            r.report.ap50,
            r.report.ap75,
            r.report.ap50_95,
            r.sampling.in_anchor,
            r.sampling.in_target,
            r.final_loss
        );
    }
    out
}
