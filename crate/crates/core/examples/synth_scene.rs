//! Render one synthetic VIIRS-like scene and its degraded DMSP-like twin,
//! then show how the saturating sensor flattens bright cores.

use ntlcut::synth::{degrade_to_dmsp_like, generate_viirs_like, DegradeParams, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        seed: 7,
        ..Default::default()
    };
    let scene = generate_viirs_like(&spec)?;
    let dmsp = degrade_to_dmsp_like(&scene.viirs, DegradeParams::default())?;

    let v = scene.viirs.values();
    let d = dmsp.values();
    let land = scene.land.values().iter().filter(|&&m| m > 0.5).count() as f64 / v.len() as f64;
    let vmax = v.iter().cloned().fold(0.0f32, f32::max);
    let saturated = d.iter().filter(|&&x| x >= 62.5).count();
    println!(
        "{}x{} scene, land fraction {land:.2}",
        spec.width, spec.height
    );
    println!(
        "VIIRS radiance max {vmax:.1}, DMSP DN max {:.1}",
        d.iter().cloned().fold(0.0f32, f32::max)
    );
    println!("{saturated} DMSP pixels at the DN 63 ceiling");

    // Coarse profile through the brightest VIIRS pixel.
    let peak = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let row = peak / spec.width;
    println!("row {row}: col, viirs, dmsp");
    for col in (0..spec.width).step_by(8) {
        let i = row * spec.width + col;
        println!("{col:4} {:9.2} {:6.2}", v[i], d[i]);
    }
    Ok(())
}
