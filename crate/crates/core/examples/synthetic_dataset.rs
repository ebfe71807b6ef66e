//! Writes a small paired dataset to disk and reads it back.
//!
//! `cargo run --example synthetic_dataset -- /tmp/btseg-data`

use std::path::PathBuf;

use btseg::synthdata::{write_dataset, Dataset, SceneSpec, Split};

fn main() -> btseg::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("btseg-example-data"));
    let spec = SceneSpec::default();
    let manifest = write_dataset(&spec, 10, 0.8, &root, "example")?;
    println!(
        "{} samples at {} ({} train, {} val)",
        manifest.count,
        root.display(),
        manifest.split_len(Split::Train),
        manifest.split_len(Split::Val)
    );

    let dataset = Dataset::load(&root)?;
    for s in dataset.split(Split::Val) {
        let moved = s.confidence.iter().filter(|&&c| c > 0.0 && c < 1.0).count();
        let invalid = s.confidence.iter().filter(|&&c| c == 0.0).count();
        println!("val #{:>2}: {moved} moved pixels, {invalid} outside the overlap", s.index);
    }
    Ok(())
}
