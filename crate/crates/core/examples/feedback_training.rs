//! Train a small feedback regressor on synthetic scenarios and report the
//! held-out vertex error after each refinement step.

use meshfeedback::feedback::{evaluate, mean_errors, train_toy, NetConfig, TrainConfig};
use meshfeedback::scenario::{channel_names, scenario_set, ScenarioConfig};
use meshfeedback::toy::{generate, ToyKind};

fn main() -> meshfeedback::Result<()> {
    let m = generate(ToyKind::Body, 0);
    let sc = ScenarioConfig::default();
    let train = scenario_set(&m, 1, 60, &sc)?;
    let test = scenario_set(&m, 2, 20, &sc)?;
    let nc = NetConfig {
        hidden: 128,
        ..NetConfig::for_model(&m, channel_names(m.num_parts).len())
    };
    let cfg = TrainConfig {
        epochs: 15,
        lr_decay: 0.9,
        ..TrainConfig::default()
    };
    let (net, report) = train_toy(&m, &train, nc, &cfg)?;
    println!(
        "final epoch loss {:.4}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    for (t, e) in mean_errors(&evaluate(&m, &net, &test)?).iter().enumerate() {
        println!("step {t}: PVE {:.1} mm", e * 1000.0);
    }
    Ok(())
}
