//! Split random rotations into swing and twist about a forearm-like axis and
//! round-trip them through the 6D representation.

use meshfeedback::rotmath::{geodesic_distance, swing_twist, Quaternion, Rotation6D, TwistRange, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> meshfeedback::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let axis = Vec3::new(1.0, 0.2, -0.1);
    let range = TwistRange::default();
    for _ in 0..5 {
        let q = Quaternion::random(&mut rng);
        let d = swing_twist(&q, &axis)?;
        let back = Rotation6D::from_matrix(&q.to_matrix()).to_matrix()?;
        println!(
            "angle {:7.2} deg  twist {:8.2} deg  in range {:5}  6D round trip {:.1e}",
            q.angle().to_degrees(),
            d.twist_angle.to_degrees(),
            range.contains(d.twist_angle),
            geodesic_distance(&back, &q.to_matrix())
        );
    }
    Ok(())
}
