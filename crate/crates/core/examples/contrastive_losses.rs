//! Unsupervised and meta-label contrastive losses on a random batch.
//!
//! Run with `cargo run --example contrastive_losses`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use spcon::contrastive::{meta_contrastive_loss, pair_losses, positive_set, unsup_contrastive_loss, AugmentedBatch};
use spcon::tensor::{l2_normalize, Tensor};

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let rows: Vec<f64> = (0..n)
        .flat_map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            l2_normalize(&Tensor::from_vec(v).unwrap()).unwrap().into_data()
        })
        .collect();
    Tensor::matrix(n, d, rows).unwrap()
}

fn main() -> spcon::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, tau) = (6, 8, 0.1);
    let first = unit_rows(&mut rng, n, d);
    let second = unit_rows(&mut rng, n, d);

    // two meta-labels per original image: a position bin and a patient id
    let labels = vec![vec![0, 0, 1, 1, 2, 2], vec![0, 1, 0, 1, 0, 1]];
    let batch = AugmentedBatch::from_views(&first, &second, &labels)?;

    println!("2N = {} views, twin of view 0 is {}", batch.len(), batch.pair_of(0));
    println!("positives of view 0 under label 0: {:?}", positive_set(&batch, 0, 0));
    println!("unsupervised loss     {:.6}", unsup_contrastive_loss(&batch, tau));
    for k in 0..batch.num_label_kinds() {
        let (loss, pairs) = meta_contrastive_loss(&batch, k, tau);
        println!("meta loss, label {k}     {loss:.6}  ({} pairs)", pairs.num_pairs());
    }

    // one class per image collapses the meta loss onto the unsupervised one
    let identity = batch.with_labels(vec![batch.image_identity_labels()])?;
    let (collapsed, _) = meta_contrastive_loss(&identity, 0, tau);
    println!("identity labels       {collapsed:.6}");

    let worst = pair_losses(&batch, 0, tau)
        .iter()
        .fold((0, 0, f64::MIN), |acc, (i, j, l)| if l > acc.2 { (i, j, l) } else { acc });
    println!("hardest positive pair ({}, {}) with loss {:.4}", worst.0, worst.1, worst.2);
    Ok(())
}
