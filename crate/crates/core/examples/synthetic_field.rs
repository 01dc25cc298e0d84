//! Generates the seeded synthetic field, prints its class make-up and
//! renders the ground truth as a PNG.
//!
//!     cargo run --release --example synthetic_field -- [seed] [out.png]

use std::path::PathBuf;

use agripipe::pipeline::{generate_synthetic_field, render_map, Palette};
use agripipe::raster::Class;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("agripipe-truth.png"));

    let (image, labels) = generate_synthetic_field(seed, 1024)?;
    let total = labels.classes().len() as f64;
    println!("seed {seed}: {}x{} field, {} bands", image.width(), image.height(), image.bands().len());
    for (c, n) in labels.histogram().iter().enumerate() {
        let class = Class::from_u8(c as u8).expect("class index");
        println!("  {:<10} {:>7} px  {:5.1}%", class.name(), n, 100.0 * *n as f64 / total);
    }
    render_map(&labels, &out, &Palette::default())?;
    println!("ground truth written to {}", out.display());
    Ok(())
}
