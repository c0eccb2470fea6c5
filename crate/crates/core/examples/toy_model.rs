//! Generate the procedural models, pose one, and save it as JSON.

use meshfeedback::io::save_model;
use meshfeedback::kinematics::ModelParams;
use meshfeedback::scenario::{sample_params, ScenarioConfig};
use meshfeedback::toy::{generate, ToyKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> meshfeedback::Result<()> {
    for kind in [ToyKind::Body, ToyKind::Hand, ToyKind::FullBody] {
        let m = generate(kind, 0);
        println!(
            "{:9} joints {:3}  vertices {:5}  faces {:5}  parts {:2}  reduced {:4}",
            kind.name(),
            m.num_joints(),
            m.num_vertices(),
            m.faces.len(),
            m.num_parts,
            m.num_reduced()
        );
    }
    let m = generate(ToyKind::Body, 0);
    let rest = m.pose(
        &ModelParams::rest(&m).rotation_matrices()?,
        &vec![0.0; m.num_betas()],
        &[],
    )?;
    let params = sample_params(&m, &mut ChaCha8Rng::seed_from_u64(1), &ScenarioConfig::default())?;
    let posed = m.pose(&params.rotation_matrices()?, &params.beta, &[])?;
    let moved = rest
        .joint_positions
        .iter()
        .zip(&posed.joint_positions)
        .map(|(a, b)| (a - b).norm());
    println!("largest joint displacement {:.3}", moved.fold(0.0, f64::max));
    let path = std::env::temp_dir().join("toy_body.json");
    save_model(&path, &m)?;
    println!("saved {}", path.display());
    Ok(())
}
