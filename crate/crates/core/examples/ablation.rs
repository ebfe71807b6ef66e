//! The seven ablation rows on a reduced budget, through the command layer.
//!
//! `cargo run --release --example ablation -- /tmp/btseg-ablation`

use std::path::PathBuf;

use btseg::cli::{cmd_ablate, cmd_generate};
use btseg::config::RunConfig;

fn main() -> btseg::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("btseg-example-ablation"));
    let mut cfg = RunConfig::default();
    cfg.data.count = 40;
    cfg.train.total_steps = 200;
    cfg.train.warmup_steps = 30;
    cfg.train.stopgrad_steps = 50;
    cfg.train.checkpoint_every = 0;
    let data = root.join("data");
    cmd_generate(&cfg, &data)?;
    cmd_ablate(&cfg, &data, &root.join("ablation"))?;
    Ok(())
}
