//! Barlow Twins loss on two views of the same embeddings, and on unrelated ones.

use btseg::barlow::{
    batch_normalize, bt_loss, bt_loss_from_raw, cross_correlation, default_lambda, Domain, Embedding, LossWeights,
    DEFAULT_EPSILON,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> btseg::Result<()> {
    let (b, p) = (64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clear = Array2::from_shape_fn((b, p), |_| rng.gen_range(-1.0..1.0));
    let noisy = clear.mapv(|v| 2.0 * v + 0.05 * rng.gen_range(-1.0..1.0));
    let other = Array2::from_shape_fn((b, p), |_| rng.gen_range(-1.0..1.0));

    let weights = LossWeights::for_dim(p)?;
    println!("lambda for p={p}: {}", default_lambda(p)?);

    let za = Embedding::new(clear, Domain::Source)?;
    let close = bt_loss_from_raw(&za, &Embedding::new(noisy.clone(), Domain::Target)?, &weights)?;
    let far = bt_loss_from_raw(&za, &Embedding::new(other, Domain::Target)?, &weights)?;
    println!("matched views   L_BT = {close:.4}");
    println!("unrelated views L_BT = {far:.4}");

    // the same value, step by step
    let na = batch_normalize(&za, DEFAULT_EPSILON)?;
    let nb = batch_normalize(&Embedding::new(noisy, Domain::Target)?, DEFAULT_EPSILON)?;
    let c = cross_correlation(&na, &nb)?;
    let diag: Vec<String> = (0..p).map(|i| format!("{:.3}", c.values()[[i, i]])).collect();
    println!("diag(C) = [{}]", diag.join(", "));
    println!("bt_loss(C) = {:.4}", bt_loss(&c, weights.lambda_bt)?);
    Ok(())
}
