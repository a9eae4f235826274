use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;
use serde::Serialize;
use xfr_core::bundle::{read_bundle, ExplanationBundle};
use xfr_core::cam::{bundle_cam, normalize_cam, top_n_classes};
use xfr_core::eval::{format_tables, run_experiment, EvalConfig, TargetSelection, SUMMARY_FILE};
use xfr_core::perturb::Baseline;
use xfr_core::render::{comparison_strip, overlay, OverlaySpec, Panel, DEFAULT_OPACITY};
use xfr_core::scorer::{Endpoint, ScorerSession, SessionOptions};
use xfr_core::sdd::{sdd_cam, SddConfig, SddResult};

mod failure;

use failure::Failure;

#[derive(Parser)]
#[command(name = "xfr", version, about = "CAM and SDD explanation maps with faithfulness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize and validate a bundle.
    Inspect {
        bundle: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Compute the SDD map of one decision and render it next to the
    /// competitor CAMs.
    Explain {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sdd: SddArgs,
        #[arg(long, default_value_t = DEFAULT_OPACITY)]
        opacity: f64,
    },
    /// Render a single CAM or SDD overlay.
    Render {
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MapKind::Sdd)]
        map: MapKind,
        #[command(flatten)]
        sdd: SddArgs,
        #[arg(long, default_value_t = DEFAULT_OPACITY)]
        opacity: f64,
        /// Write the bare colorized map instead of an overlay.
        #[arg(long)]
        heatmap_only: bool,
    },
    /// Run the deletion/retention experiment over a directory of bundles.
    Evaluate {
        bundles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `tcp://host:port` or a command that speaks the protocol on stdio.
        #[arg(long, env = "XFR_SCORER")]
        scorer: String,
        #[command(flatten)]
        sdd: SddArgs,
        /// Share of pixels in each mask.
        #[arg(long, default_value_t = xfr_core::eval::DEFAULT_FRACTION)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = Baseline::from_str, default_value = "scattered")]
        baseline: Baseline,
        #[arg(long, default_value_t = xfr_core::scorer::DEFAULT_MAX_INFLIGHT)]
        max_inflight: usize,
        /// Seconds to wait for the scorer's hello.
        #[arg(long, default_value_t = 30.0)]
        hello_timeout: f64,
        /// Seconds to wait for each response.
        #[arg(long, default_value_t = 60.0)]
        request_timeout: f64,
        /// Print the summary as JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MapKind {
    Cam,
    Sdd,
}

#[derive(Args)]
struct SddArgs {
    /// `predicted`, `true`, or a class index.
    #[arg(long, default_value = "predicted", value_parser = parse_target)]
    target: TargetSelection,
    /// Number of top-probability classes in the comparison set.
    #[arg(long, default_value_t = 5)]
    top_n: usize,
    /// Explicit comparison set, overriding --top-n.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 50.0)]
    clamp_max: f64,
}

impl SddArgs {
    fn config(&self) -> Result<SddConfig, Failure> {
        let cfg = SddConfig {
            competitor_count: self.top_n,
            clamp_max: self.clamp_max,
            members: self.classes.clone(),
            ..SddConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_target(s: &str) -> Result<TargetSelection, String> {
    match s {
        "predicted" => Ok(TargetSelection::Predicted),
        "true" => Ok(TargetSelection::True),
        other => other
            .parse()
            .map(TargetSelection::Class)
            .map_err(|_| format!("expected `predicted`, `true` or a class index, got {other:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return Failure::validation(e.to_string().trim_end()).report(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Inspect { bundle, json } => inspect(&bundle, json),
        Command::Explain {
            bundle,
            out,
            sdd,
            opacity,
        } => explain(&bundle, &out, &sdd, opacity),
        Command::Render {
            bundle,
            out,
            map,
            sdd,
            opacity,
            heatmap_only,
        } => render(&bundle, &out, map, &sdd, opacity, heatmap_only),
        Command::Evaluate {
            bundles,
            out,
            scorer,
            sdd,
            fraction,
            seed,
            baseline,
            max_inflight,
            hello_timeout,
            request_timeout,
            json,
        } => {
            let cfg = EvalConfig {
                sdd: sdd.config()?,
                fraction,
                seed,
                baseline,
                target: sdd.target,
            };
            let options = SessionOptions {
                hello_timeout: seconds(hello_timeout)?,
                request_timeout: seconds(request_timeout)?,
                max_inflight,
            };
            evaluate(&bundles, &out, &scorer, &cfg, options, json)
        }
    }
}

fn seconds(value: f64) -> Result<Duration, Failure> {
    Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| Failure::validation(format!("invalid timeout {value} s")))
}

#[derive(Serialize)]
struct ClassEntry {
    index: usize,
    label: String,
    probability: f64,
}

#[derive(Serialize)]
struct Summary {
    bundle: PathBuf,
    image_file: String,
    image_size: [u32; 2],
    feature_maps: Vec<usize>,
    head_weights: Vec<usize>,
    classes: usize,
    predicted_class: ClassEntry,
    true_class: Option<ClassEntry>,
    top: Vec<ClassEntry>,
}

fn class_entry(bundle: &ExplanationBundle, index: usize) -> ClassEntry {
    ClassEntry {
        index,
        label: bundle.class_labels[index].clone(),
        probability: bundle.probabilities[index],
    }
}

fn inspect(path: &Path, json: bool) -> Result<(), Failure> {
    let bundle = read_bundle(path)?;
    let top = top_n_classes(&bundle.probabilities, bundle.num_classes().min(5))?;
    let (w, h) = bundle.image_size();
    let summary = Summary {
        bundle: path.to_path_buf(),
        image_file: bundle.image_file.clone(),
        image_size: [w, h],
        feature_maps: bundle.feature_maps.shape().to_vec(),
        head_weights: bundle.head_weights.shape().to_vec(),
        classes: bundle.num_classes(),
        predicted_class: class_entry(&bundle, bundle.predicted_class),
        true_class: bundle.true_class.map(|c| class_entry(&bundle, c)),
        top: top.iter().map(|&c| class_entry(&bundle, c)).collect(),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        return Ok(());
    }
    let dims = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
    println!("bundle:          {}", path.display());
    println!("image:           {} ({w}x{h})", summary.image_file);
    println!("feature maps:    {} [K, H, W]", dims(&summary.feature_maps));
    println!("head weights:    {} [C, K]", dims(&summary.head_weights));
    println!("classes:         {}", summary.classes);
    let p = &summary.predicted_class;
    println!("predicted class: {} {} (p = {:.6})", p.index, p.label, p.probability);
    match &summary.true_class {
        Some(t) => println!("true class:      {} {}", t.index, t.label),
        None => println!("true class:      unknown"),
    }
    println!("validation:      ok");
    println!("top classes:");
    for e in &summary.top {
        println!("  {:>5}  {:.6}  {}", e.index, e.probability, e.label);
    }
    Ok(())
}

fn create_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::validation(format!("{}: {e}", out.display())))
}

fn save(img: &RgbImage, path: &Path) -> Result<(), Failure> {
    img.save(path)
        .map_err(|e| Failure::compute(format!("{}: {e}", path.display())))
}

fn explained(bundle: &ExplanationBundle, args: &SddArgs) -> Result<SddResult, Failure> {
    let cfg = args.config()?;
    let target = args.target.resolve(bundle)?;
    Ok(sdd_cam(bundle, target, &cfg)?)
}

#[derive(Serialize)]
struct SddReport<'a> {
    target_label: &'a str,
    member_labels: Vec<&'a str>,
    #[serde(flatten)]
    result: &'a SddResult,
}

fn explain(path: &Path, out: &Path, args: &SddArgs, opacity: f64) -> Result<(), Failure> {
    let bundle = read_bundle(path)?;
    let spec = OverlaySpec::new(opacity)?;
    let sdd = explained(&bundle, args)?;
    create_out(out)?;

    let label = |c: usize| bundle.class_labels[c].as_str();
    let report = SddReport {
        target_label: label(sdd.target_class),
        member_labels: sdd.members.iter().map(|&c| label(c)).collect(),
        result: &sdd,
    };
    let mut json = serde_json::to_string_pretty(&report).expect("SDD result serializes");
    json.push('\n');
    let json_path = out.join("sdd.json");
    fs::write(&json_path, json).map_err(|e| Failure::compute(format!("{}: {e}", json_path.display())))?;

    // traditional CAMs in member order, then the SDD map
    let mut panels = Vec::with_capacity(sdd.members.len() + 1);
    for &c in &sdd.members {
        let grid = normalize_cam(&bundle_cam(&bundle, c)?).grid;
        save(&overlay(&bundle.image, &grid, &spec)?, &out.join(format!("cam_{c}.png")))?;
        panels.push(Panel {
            grid,
            label: c.to_string(),
        });
    }
    let sdd_grid = sdd.normalized_map();
    save(&overlay(&bundle.image, &sdd_grid, &spec)?, &out.join(format!("sdd_{}.png", sdd.target_class)))?;
    panels.push(Panel {
        grid: sdd_grid,
        label: "SDD".into(),
    });
    save(&comparison_strip(&bundle.image, &panels, &spec)?, &out.join("strip.png"))?;
    println!(
        "target {} ({}), members {:?}, F = {:.4}, alpha = {:.4}",
        sdd.target_class,
        report.target_label,
        sdd.members,
        sdd.scaling_factor,
        sdd.alpha
    );
    Ok(())
}

fn render(
    path: &Path,
    out: &Path,
    map: MapKind,
    args: &SddArgs,
    opacity: f64,
    heatmap_only: bool,
) -> Result<(), Failure> {
    let bundle = read_bundle(path)?;
    let spec = OverlaySpec::new(opacity)?;
    let (name, grid) = match map {
        MapKind::Sdd => {
            let sdd = explained(&bundle, args)?;
            (format!("sdd_{}", sdd.target_class), sdd.normalized_map())
        }
        MapKind::Cam => {
            let target = args.target.resolve(&bundle)?;
            (format!("cam_{target}"), normalize_cam(&bundle_cam(&bundle, target)?).grid)
        }
    };
    create_out(out)?;
    let (img, file) = if heatmap_only {
        // full opacity is the upsampled colorized map
        (overlay(&bundle.image, &grid, &OverlaySpec::new(1.0)?)?, format!("{name}_heatmap.png"))
    } else {
        (overlay(&bundle.image, &grid, &spec)?, format!("{name}.png"))
    };
    let dest = out.join(file);
    save(&img, &dest)?;
    println!("{}", dest.display());
    Ok(())
}

fn evaluate(
    bundles: &Path,
    out: &Path,
    scorer: &str,
    cfg: &EvalConfig,
    options: SessionOptions,
    json: bool,
) -> Result<(), Failure> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Failure::validation(format!("fraction {} outside (0, 1]", cfg.fraction)));
    }
    if options.max_inflight == 0 {
        return Err(Failure::validation("--max-inflight must be at least 1"));
    }
    let endpoint: Endpoint = scorer.parse().map_err(Failure::validation)?;
    let mut session = ScorerSession::connect(&endpoint, options)?;
    let report = run_experiment(bundles, cfg, &mut session, out)?;
    if json {
        let path = out.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Failure::compute(format!("{}: {e}", path.display())))?;
        print!("{text}");
    } else {
        print!("{}", format_tables(&report.summary));
        if report.bundles_failed > 0 {
            println!("\n{} of {} bundles failed; see {}", report.bundles_failed, report.bundles_total, SUMMARY_FILE);
        }
    }
    Ok(())
}
