//! Merge synthetic body, hand and face estimates with both wrist strategies.

use meshfeedback::integration::{
    adaptive_integrate, fullbody_joints, integrate, synthetic_estimates, visibility_gate, Strategy,
    DEFAULT_VIS_THRESHOLD,
};
use meshfeedback::rotmath::TwistRange;
use meshfeedback::toy::{generate, ToyKind};

fn main() -> meshfeedback::Result<()> {
    let m = generate(ToyKind::FullBody, 0);
    let range = TwistRange::default();
    for seed in 0..4 {
        let est = synthetic_estimates(&m, seed)?;
        let gated = visibility_gate(&est, DEFAULT_VIS_THRESHOLD)?;
        let (cp, _) = integrate(&m, &gated, Strategy::CopyPaste, &range)?;
        let (ad, report) = adaptive_integrate(&m, &est, &range, DEFAULT_VIS_THRESHOLD)?;
        let (a, _) = fullbody_joints(&m, &cp)?;
        let (b, _) = fullbody_joints(&m, &ad)?;
        let drift = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        print!("seed {seed}: joint drift {drift:.1e}");
        for h in &report.hands {
            let deg = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}", v.to_degrees()));
            print!(
                "  {} {:?} twist {} moved {}",
                h.side.name(),
                h.mode,
                deg(h.alpha_tw),
                deg(h.alpha_cp)
            );
        }
        println!();
    }
    Ok(())
}
