use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meshfeedback::cli::{self, IntegrateOptions, RefineOptions, RenderOptions};
use meshfeedback::integration::{Strategy, DEFAULT_VIS_THRESHOLD};
use meshfeedback::rotmath::TwistRange;
use meshfeedback::toy::ToyKind;
use meshfeedback::Result;

#[derive(Parser)]
#[command(
    name = "meshfeedback",
    version,
    about = "Toy mesh-alignment feedback regression and full-body integration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (genmodel) or directory (other commands).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural body, hand or full-body model.
    Genmodel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "body")]
        kind: ToyKind,
    },
    /// Run the feedback loop on seeded scenarios and record per-iteration errors.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value_t = 5)]
        reduce_dim: usize,
        /// Held-out scenarios to evaluate.
        #[arg(long, default_value_t = 20)]
        scenarios: usize,
        /// Train on this many scenarios first.
        #[arg(long, default_value_t = 0)]
        train: usize,
        #[arg(long, default_value_t = 80)]
        epochs: usize,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        zero_weights: bool,
    },
    /// Combine body, hand and face estimates into full-body parameters.
    Integrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Part estimates document; synthesized from --seed when absent.
        #[arg(long)]
        estimates: Option<PathBuf>,
        #[arg(long, default_value = "adaptive")]
        strategy: Strategy,
        #[arg(long, default_value_t = -72.0, allow_negative_numbers = true)]
        twist_min_deg: f64,
        #[arg(long, default_value_t = 72.0, allow_negative_numbers = true)]
        twist_max_deg: f64,
        #[arg(long, default_value_t = DEFAULT_VIS_THRESHOLD)]
        vis_threshold: f64,
    },
    /// Render part, UV and PNCC maps as PNG.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Parameter document; sampled from --seed when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 56)]
        resolution: usize,
    },
    /// Joint and vertex errors between two parameter documents.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String> {
    Ok(match cli.command {
        Command::Genmodel { common, kind } => {
            let m = cli::genmodel(kind, common.seed, &common.out)?;
            format!(
                "ok command=genmodel joints={} vertices={}",
                m.num_joints(),
                m.num_vertices()
            )
        }
        Command::Refine {
            common,
            model,
            iterations,
            grid,
            reduce_dim,
            scenarios,
            train,
            epochs,
            weights,
            zero_weights,
        } => {
            let s = cli::refine(&RefineOptions {
                model,
                seed: common.seed,
                iterations,
                grid,
                reduce_dim,
                scenarios,
                train,
                epochs,
                weights,
                zero_weights,
                out: common.out,
            })?;
            let pve: Vec<String> = s.mean_pve_mm.iter().map(|x| format!("{x:.3}")).collect();
            format!("ok command=refine mean_pve_mm={}", pve.join(","))
        }
        Command::Integrate {
            common,
            model,
            estimates,
            strategy,
            twist_min_deg,
            twist_max_deg,
            vis_threshold,
        } => {
            let r = cli::integrate_cmd(&IntegrateOptions {
                model,
                estimates,
                seed: common.seed,
                strategy,
                range: TwistRange::from_degrees(twist_min_deg, twist_max_deg)?,
                vis_threshold,
                out: common.out,
            })?;
            let modes: Vec<&str> = r.hands.iter().map(|h| h.mode.name()).collect();
            format!("ok command=integrate modes={}", modes.join(","))
        }
        Command::Render {
            common,
            model,
            params,
            resolution,
        } => {
            let fg = cli::render(&RenderOptions {
                model,
                params,
                seed: common.seed,
                resolution,
                out: common.out,
            })?;
            format!("ok command=render foreground_pixels={fg}")
        }
        Command::Eval {
            common,
            model,
            pred,
            gt,
        } => {
            let r = cli::eval(model.as_deref(), &pred, &gt, &common.out)?;
            format!(
                "ok command=eval mpjpe_mm={:.6} pa_mpjpe_mm={:.6} pve_mm={:.6} pa_pve_mm={:.6}",
                r.mpjpe_mm, r.pa_mpjpe_mm, r.pve_mm, r.pa_pve_mm
            )
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!(
                "error kind=usage message={}",
                serde_json::Value::String(first.to_string())
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            ExitCode::from(1)
        }
    }
}
