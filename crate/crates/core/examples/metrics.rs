//! Joint errors before and after similarity alignment.

use meshfeedback::metrics::{mpjpe, pa_mpjpe, procrustes};
use meshfeedback::rotmath::{Quaternion, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> meshfeedback::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gt: Vec<Vec3> = (0..22)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.2..0.2),
            )
        })
        .collect();
    let r = Quaternion::random(&mut rng).to_matrix();
    let pred: Vec<Vec3> = gt
        .iter()
        .map(|p| r * p * 1.2 + Vec3::new(0.3, -0.1, 2.0) + Vec3::new(rng.random_range(-0.01..0.01), 0.0, 0.0))
        .collect();
    let a = procrustes(&pred, &gt)?;
    println!("MPJPE    {:.1} mm", mpjpe(&pred, &gt)? * 1000.0);
    println!("PA-MPJPE {:.1} mm", pa_mpjpe(&pred, &gt)? * 1000.0);
    println!("recovered scale {:.4}", a.scale);
    Ok(())
}
