//! Scores a deliberately corrupted prediction against ground truth and
//! prints the per-class table and the single-line metrics record.

use agripipe::evaluation::{compute_metrics, confusion};
use agripipe::pipeline::generate_synthetic_field;
use agripipe::raster::{Class, LabelMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (_, truth) = generate_synthetic_field(2, 512)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // weeds are half the time mistaken for crop, plus 2% uniform noise
    let noisy: Vec<u8> = truth
        .classes()
        .iter()
        .map(|&c| match c {
            c if rng.random::<f64>() < 0.02 => (c + rng.random_range(1..3)) % 3,
            2 if rng.random::<bool>() => Class::Crop as u8,
            c => c,
        })
        .collect();
    let pred = LabelMask::new(truth.width(), truth.height(), noisy)?;
    let cm = confusion(&truth, &pred, None)?;
    println!("confusion (rows = truth): {:?}", cm.counts);
    let report = compute_metrics(&cm)?;
    println!("{report}");
    println!("{}", report.to_record());
    Ok(())
}
