use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use rotatr::harness::ablate::{markdown_table, named_grid, parse_grid, run_ablation, Variant};
use rotatr::harness::config::RunConfig;
use rotatr::harness::eval::ApInterpolation;
use rotatr::harness::gradsuite::run_suite;
use rotatr::harness::sampling::dump_sampling;
use rotatr::harness::train::{eval_scenes, evaluate_model, load_run, run_training, train_scenes};
use rotatr::Result;

#[derive(Parser)]
#[command(name = "rotatr", version, about = "Oriented object detection on synthetic scenes")]
struct Cli {
    /// Base seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render scenes as PPM images with JSON annotations.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        /// Number of scenes; defaults to the split size in the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model, writing config, metrics log and snapshot.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a trained run on its held-out scenes.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// VOC 11-point interpolation instead of 101-point.
        #[arg(long)]
        voc11: bool,
    },
    /// Train and compare configuration variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Built-in grid: modules, alpha or queries.
        #[arg(long, default_value = "modules")]
        grid: String,
        /// File with one `label: key=value, ...` variant per line.
        #[arg(long, conflicts_with = "variant")]
        grid_file: Option<PathBuf>,
        /// Inline variant, repeatable; replaces the grid.
        #[arg(long)]
        variant: Vec<String>,
        #[arg(long)]
        voc11: bool,
    },
    /// Finite-difference gradient checks; exits nonzero on failure.
    Gradcheck {
        /// Check to run, repeatable; all when omitted.
        #[arg(long)]
        case: Vec<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Plot where matched queries sample on one held-out scene.
    DumpSampling {
        #[arg(long)]
        run: PathBuf,
        /// Index into the held-out scenes.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Upscaling factor of the PPM.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file applied before individual flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the defaults.
    #[arg(long)]
    desk: bool,
    #[command(flatten)]
    set: Overrides,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if self.desk => RunConfig::desk(),
            None => RunConfig::default(),
        };
        for (k, v) in &self.set.0 {
            cfg.set(k, v)?;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One `--<key> <value>` flag per config key except `seed`.
#[derive(Default)]
struct Overrides(Vec<(String, String)>);

fn override_keys() -> impl Iterator<Item = &'static str> {
    RunConfig::keys().into_iter().filter(|k| *k != "seed")
}

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        Ok(Overrides(
            override_keys()
                .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        override_keys().fold(cmd, |cmd, k| {
            cmd.arg(Arg::new(k).long(k).value_name("VALUE").help_heading("Config keys"))
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn interp(voc11: bool) -> ApInterpolation {
    if voc11 {
        ApInterpolation::Points11
    } else {
        ApInterpolation::Points101
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| rotatr::Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, split: Split, count: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    match (split, count) {
        (Split::Train, Some(n)) => cfg.train.train_scenes = n,
        (Split::Eval, Some(n)) => cfg.train.eval_scenes = n,
        _ => {}
    }
    let scenes = match split {
        Split::Train => train_scenes(&cfg)?,
        Split::Eval => eval_scenes(&cfg)?,
    };
    fs::create_dir_all(out)?;
    for (i, s) in scenes.iter().enumerate() {
        fs::write(out.join(format!("scene_{i:04}.ppm")), s.to_ppm())?;
        write_json(
            &out.join(format!("scene_{i:04}.json")),
            &serde_json::json!({ "seed": s.seed, "targets": s.annotations() }),
        )?;
    }
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn ablate(cfg: &RunConfig, grid: &str, grid_file: Option<&Path>, inline: &[String], voc11: bool, out: &Path) -> Result<()> {
    let variants: Vec<Variant> = if !inline.is_empty() {
        inline.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?
    } else if let Some(path) = grid_file {
        parse_grid(&fs::read_to_string(path)?)?
    } else {
        named_grid(grid)?
    };
    let rows = run_ablation(cfg, &variants, interp(voc11))?;
    let table = markdown_table(&rows);
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.md"), &table)?;
    write_json(&out.join("ablation.json"), &rows)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(cases: &[String], instances: usize, tolerance: f64, seed: u64, out: &Path) -> Result<bool> {
    let reports = run_suite(cases, instances, tolerance, seed)?;
    for r in &reports {
        println!(
            "{:<20} {} max rel err {:.2e} over {} instances ({} elements, {} at kinks)",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.instances,
            r.checked,
            r.kinks
        );
    }
    fs::create_dir_all(out)?;
    write_json(&out.join("gradcheck.json"), &reports)?;
    Ok(reports.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<bool> {
    let out = cli.out_dir.as_path();
    match cli.cmd {
        Cmd::GenData { cfg, split, count } => gen_data(&cfg.resolve(cli.seed)?, split, count, out)?,
        Cmd::Train { cfg } => {
            let cfg = cfg.resolve(cli.seed)?;
            run_training(&cfg, out)?;
            info!("run written to {}", out.display());
        }
        Cmd::Eval { run, voc11 } => {
            let (mut cfg, model) = load_run(&run)?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let report = evaluate_model(&model, &eval_scenes(&cfg)?, interp(voc11))?;
            println!(
                "AP50 {:.4}  AP75 {:.4}  AP50:95 {:.4}  containment {:.3}",
                report.ap50,
                report.ap75,
                report.ap50_95,
                report.containment.unwrap_or(f64::NAN)
            );
            fs::create_dir_all(out)?;
            write_json(&out.join("eval.json"), &report)?;
        }
        Cmd::Ablate {
            cfg,
            grid,
            grid_file,
            variant,
            voc11,
        } => ablate(&cfg.resolve(cli.seed)?, &grid, grid_file.as_deref(), &variant, voc11, out)?,
        Cmd::Gradcheck {
            case,
            instances,
            tolerance,
        } => return gradcheck(&case, instances, tolerance, cli.seed.unwrap_or(0), out),
        Cmd::DumpSampling { run, scene, scale } => {
            let (mut cfg, model) = load_run(&run)?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            cfg.train.eval_scenes = cfg.train.eval_scenes.max(scene + 1);
            let scenes = eval_scenes(&cfg)?;
            let plot = dump_sampling(&model, &scenes[scene], scale.max(1))?;
            fs::create_dir_all(out)?;
            let stem = format!("sampling_{scene:04}");
            fs::write(out.join(format!("{stem}.ppm")), &plot.ppm)?;
            fs::write(out.join(format!("{stem}.svg")), &plot.svg)?;
            write_json(&out.join(format!("{stem}.json")), &plot.stats)?;
            if plot.stats.matched == 0 {
                warn!("no matched queries on scene {scene}");
            }
            println!(
                "{} matched queries, {} points: {:.3} inside anchor, {:.3} inside target",
                plot.stats.matched, plot.stats.points, plot.stats.in_anchor, plot.stats.in_target
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
