//! Radiometric calibration against a reference panel: raw sensor counts
//! become reflectance by scaling each band with `r_target / panel_mean`.

use std::collections::BTreeMap;

use agripipe::pipeline::{generate_synthetic_field, synthetic_panel, to_raw_brightness, PANEL_REFLECTANCE, PANEL_SIZE};
use agripipe::preprocess::{apply_calibration, derive_calibration, Rect};
use agripipe::raster::BandKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (truth, labels) = generate_synthetic_field(3, 512)?;
    let raw = to_raw_brightness(&truth)?;
    let panel = to_raw_brightness(&synthetic_panel(3)?)?;

    // central 32x32 of the panel, away from any edge effects
    let region = Rect::new(PANEL_SIZE / 4, PANEL_SIZE / 4, PANEL_SIZE / 2, PANEL_SIZE / 2);
    let targets: BTreeMap<BandKind, f64> = BandKind::ALL.iter().map(|&k| (k, PANEL_REFLECTANCE)).collect();
    let record = derive_calibration(&panel, region, &targets)?;
    let calibrated = apply_calibration(&raw, &record)?;

    print!("{}", record.to_text());
    println!("{:<8} {:>10} {:>12} {:>10}", "band", "raw mean", "calibrated", "truth");
    for kind in BandKind::ALL {
        let mean = |img: &agripipe::raster::MultispectralImage| {
            let b = img.band(kind).expect("band");
            b.values().iter().map(|&v| v as f64).sum::<f64>() / b.len() as f64
        };
        println!("{:<8} {:>10.1} {:>12.4} {:>10.4}", kind.name(), mean(&raw), mean(&calibrated), mean(&truth));
    }
    println!("{} labelled pixels", labels.classes().len());
    Ok(())
}
