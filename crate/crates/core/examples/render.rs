//! Rasterize a posed toy body into part, UV and PNCC maps and print the part map.

use meshfeedback::raster::{rasterize, Projection, RasterConfig};
use meshfeedback::scenario::{sample_params, ScenarioConfig};
use meshfeedback::toy::{generate, ToyKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> meshfeedback::Result<()> {
    let m = generate(ToyKind::Body, 0);
    let params = sample_params(&m, &mut ChaCha8Rng::seed_from_u64(3), &ScenarioConfig::default())?;
    let posed = m.pose(&params.rotation_matrices()?, &params.beta, &[])?;
    let size = 40;
    let cfg = RasterConfig::square(size)?;
    let map = rasterize(
        &posed.vertices,
        &m.faces,
        &m.vertex_attributes,
        m.num_parts,
        Projection::Weak(&params.camera),
        &cfg,
    )?;
    let glyphs: Vec<char> = ".123456789abcdefghijklmnopqrstuvwxyz".chars().collect();
    for y in 0..size {
        let row: String = (0..size)
            .map(|x| glyphs[map.part_index[y * size + x] as usize % glyphs.len()])
            .collect();
        println!("{row}");
    }
    let fg = map.part_index.iter().filter(|&&p| p != 0).count();
    println!("foreground pixels {fg} of {}", size * size);
    Ok(())
}
