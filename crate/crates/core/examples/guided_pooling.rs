//! Average, segmentation-masked, confidence-weighted and combined pooling of
//! a feature map where one region holds a mobile object.

use btseg::pooling::{
    average_pool, confidence_average_pool, downsample_confidence, mask_from_segmentation, masked_average_pool,
    segconf_average_pool, ConfidenceMap, FeatureMap, POOL_EPSILON,
};
use btseg::types::SegmentationMap;
use ndarray::{Array2, Array3, Array4};

fn main() -> btseg::Result<()> {
    let (h, w, grid) = (16, 16, (4, 4));
    // class 0 background, class 4 a car in the top-left quarter
    let labels = Array3::from_shape_fn((1, h, w), |(_, i, j)| if i < 8 && j < 8 { 4u8 } else { 0 });
    let seg = SegmentationMap::new(labels, 6)?;
    let mask = mask_from_segmentation(&seg, &[4, 5], grid)?;

    // the car cells carry a large activation
    let y = Array4::from_shape_fn((1, 2, grid.0, grid.1), |(_, c, i, j)| {
        if i < 2 && j < 2 {
            10.0
        } else {
            c as f64
        }
    });
    let fm = FeatureMap::new(y)?;
    let conf_full = Array2::from_shape_fn((h, w), |(i, _)| if i < 4 { 0.1 } else { 1.0 });
    let conf = downsample_confidence(&conf_full.insert_axis(ndarray::Axis(0)), grid)?;

    let show = |name: &str, v: &Array2<f64>| println!("{name:<8} [{:.3}, {:.3}]", v[[0, 0]], v[[0, 1]]);
    show("avg", average_pool(&fm).values());
    show("segm", masked_average_pool(&fm, &mask, POOL_EPSILON)?.values());
    show("conf", confidence_average_pool(&fm, &conf, POOL_EPSILON)?.values());
    show("segconf", segconf_average_pool(&fm, &mask, &conf, POOL_EPSILON)?.values());
    let uniform = ConfidenceMap::ones((1, grid.0, grid.1));
    show("conf=1", confidence_average_pool(&fm, &uniform, POOL_EPSILON)?.values());
    Ok(())
}
