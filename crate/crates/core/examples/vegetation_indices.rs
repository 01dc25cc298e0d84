//! Per-class means of the five vegetation indices on the synthetic field.

use agripipe::indices::{compute_index, IndexKind, DEFAULT_L_FACTOR};
use agripipe::pipeline::generate_synthetic_field;
use agripipe::raster::CLASS_COUNT;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (image, labels) = generate_synthetic_field(11, 512)?;
    println!("{:<6} {:>11} {:>8} {:>8}", "index", "background", "crop", "weed");
    for kind in IndexKind::ALL {
        let plane = compute_index(&image, kind, DEFAULT_L_FACTOR)?;
        let mut sums = [0.0f64; CLASS_COUNT];
        let mut counts = [0usize; CLASS_COUNT];
        for ((&c, &v), &ok) in labels.classes().iter().zip(&plane.values).zip(&plane.valid) {
            if ok {
                sums[c as usize] += v as f64;
                counts[c as usize] += 1;
            }
        }
        let m: Vec<f64> = (0..CLASS_COUNT).map(|c| sums[c] / counts[c].max(1) as f64).collect();
        println!("{:<6} {:>11.3} {:>8.3} {:>8.3}", kind.name(), m[0], m[1], m[2]);
    }
    Ok(())
}
