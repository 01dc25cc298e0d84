//! Trains the pixel classifier on synthetic-field tiles and reports the loss
//! curve and held-out accuracy for both architectures.

use agripipe::classifier::{train, Architecture, TrainConfig, TrainingSet};
use agripipe::dataset::{split_tiles, tile_image};
use agripipe::evaluation::{compute_metrics, confusion, ConfusionMatrix};
use agripipe::indices::{build_feature_stack, DEFAULT_L_FACTOR};
use agripipe::pipeline::generate_synthetic_field;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (image, labels) = generate_synthetic_field(7, 1024)?;
    let stack = build_feature_stack(&image, DEFAULT_L_FACTOR)?;
    let tiles = tile_image(&stack, &labels, "field", 256, 256)?;
    let ids: Vec<String> = tiles.iter().map(|t| t.id()).collect();
    let split = split_tiles(&ids, 7)?;
    let pick = |names: &[String]| tiles.iter().filter(|t| names.contains(&t.id())).cloned().collect::<Vec<_>>();
    let (train_tiles, test_tiles) = (pick(&split.train), pick(&split.test));
    let data = TrainingSet::from_tiles(&train_tiles);
    println!("{} training pixels from {} tiles", data.len(), train_tiles.len());

    for architecture in [Architecture::Linear, Architecture::Hidden(16)] {
        let config = TrainConfig { architecture, epochs: 5, seed: 7, ..TrainConfig::default() };
        let outcome = train(&data, &config)?;
        let losses: Vec<String> = outcome.loss_history.iter().map(|l| format!("{l:.4}")).collect();
        let mut cm = ConfusionMatrix::default();
        for t in &test_tiles {
            let (pred, _) = outcome.model.predict(&t.features)?;
            let c = confusion(&t.labels, &pred, Some(t.features.valid()))?;
            cm.merge(&c);
        }
        let report = compute_metrics(&cm)?;
        println!("{architecture:?}: loss {}", losses.join(" -> "));
        println!("  test accuracy {:.4}, mIOU {:.4}", report.accuracy, report.miou);
    }
    Ok(())
}
