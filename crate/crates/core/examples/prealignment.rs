//! Warps an adverse image onto its clear counterpart, finds the largest
//! fully valid rectangle and crops the aligned pair.

use btseg::geometry::{apply_warp, crop_triple, filter_pair, largest_interior_rectangle, FilterRule};
use btseg::synthdata::{generate_pair, SceneSpec};

fn main() -> btseg::Result<()> {
    let spec = SceneSpec::default();
    let sample = generate_pair(&spec, 3)?;
    let (warped, valid) = apply_warp(&sample.target, &sample.warp)?;
    let (h, w) = valid.dim();
    let count = valid.iter().filter(|&&v| v).count();
    println!("{h}x{w} frame, {count} valid pixels ({:.1}%)", 100.0 * count as f64 / (h * w) as f64);

    let rect = largest_interior_rectangle(&valid)?;
    println!("largest interior rectangle {rect:?}, area {}", rect.area());

    let rule = FilterRule::default();
    let keep = filter_pair(valid.view(), rule.min_valid_fraction, rule.min_rect_side);
    println!("passes filter {rule:?}: {keep}");

    let pair = crop_triple(&sample.source, &warped, &sample.source_labels, &sample.confidence_f64(), rect)?;
    println!("aligned pair {}x{}", pair.height(), pair.width());

    // a few rows of the validity mask
    for i in (0..h).step_by(h / 8) {
        let row: String = (0..w).step_by(2).map(|j| if valid[[i, j]] { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}
