//! Trains a short run with and without the Barlow Twins term and evaluates
//! both on the adverse images.

use btseg::barlow::Domain;
use btseg::metrics::{class_names, evaluate, format_table};
use btseg::model::ModelSpec;
use btseg::synthdata::{generate_pair, SceneSpec};
use btseg::trainer::{TrainConfig, Trainer};

fn main() -> btseg::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = SceneSpec::default();
    let samples = (0..40).map(|i| generate_pair(&spec, i)).collect::<btseg::Result<Vec<_>>>()?;
    let (train, val) = samples.split_at(32);

    let mut rows = Vec::new();
    for use_bt in [false, true] {
        let mut cfg = TrainConfig {
            total_steps: steps,
            warmup_steps: steps / 7,
            stopgrad_steps: steps / 4,
            ..TrainConfig::default()
        };
        cfg.switches.use_bt = use_bt;
        let mut trainer = Trainer::new(cfg.clone(), ModelSpec::default(), train, &spec.mobile_class_ids, "")?;
        let records = trainer.run(None)?;
        let last = records.last().expect("steps > 0");
        println!("use_bt={use_bt}: final l_ce {:.3}, l_bt {:?}", last.l_ce, last.l_bt);
        rows.push((cfg.switches, evaluate(trainer.model(), val, Domain::Target, "")?));
    }
    print!("{}", format_table(&rows, &class_names(spec.num_classes)));
    Ok(())
}
