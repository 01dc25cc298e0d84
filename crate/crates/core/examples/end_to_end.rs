//! Runs the whole stage chain the way the CLI does, writing every artifact
//! and the run log under one directory.
//!
//!     cargo run --release --example end_to_end -- [out_dir]

use std::path::PathBuf;

use agripipe::pipeline::{run_stage, PipelineConfig, Stage};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out =
        std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("agripipe-end-to-end"));
    let text = "seed=7\ntile.size=256\ntile.stride=128\ntrain.augment=true\n";
    let mut config = PipelineConfig::parse(text, &out)?;
    config.set_out_dir(out.clone());

    let chain = [
        Stage::Synth,
        Stage::Denoise,
        Stage::Calibrate,
        Stage::Features,
        Stage::Tile,
        Stage::Split,
        Stage::Augment,
        Stage::Train,
        Stage::Predict,
        Stage::Evaluate,
        Stage::Render,
    ];
    for stage in chain {
        let report = run_stage(stage, &config)?;
        println!("{:<9} {:>6} ms  {}", stage.name(), report.duration_ms, report.summary);
    }
    println!("artifacts and run.log in {}", out.display());
    Ok(())
}
