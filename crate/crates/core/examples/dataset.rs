//! Feature stack -> tiles -> seeded train/val/test split -> augmentation.

use agripipe::dataset::{augment_tile, split_tiles, tile_image};
use agripipe::indices::{build_feature_stack, DEFAULT_L_FACTOR};
use agripipe::pipeline::generate_synthetic_field;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (image, labels) = generate_synthetic_field(21, 1024)?;
    let stack = build_feature_stack(&image, DEFAULT_L_FACTOR)?;
    let tiles = tile_image(&stack, &labels, "field", 256, 256)?;
    let ids: Vec<String> = tiles.iter().map(|t| t.id()).collect();
    println!("{} tiles: {} ... {}", tiles.len(), ids[0], ids[ids.len() - 1]);

    let manifest = split_tiles(&ids, 42)?;
    print!("{}", manifest.to_text());

    let first = tiles.iter().find(|t| t.id() == manifest.train[0]).expect("train tile");
    for v in augment_tile(first)? {
        println!("  {} class counts {:?}", v.id(), v.labels.histogram());
    }
    Ok(())
}
