//! Closed-form self-paced weights, loss bounds, and the weighted loss.

use spcon::contrastive::AugmentedBatch;
use spcon::self_paced::{combined_sp_loss, loss_bounds, optimal_weight, Regularizer, SelfPacedConfig};
use spcon::tensor::{l2_normalize, Tensor};

fn main() -> spcon::Result<()> {
    let gamma = 2.0;
    println!("{:>6} {:>6} {:>6}", "loss", "hard", "linear");
    for l in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5] {
        println!(
            "{l:>6.2} {:>6.2} {:>6.2}",
            optimal_weight(l, gamma, Regularizer::Hard),
            optimal_weight(l, gamma, Regularizer::Linear)
        );
    }

    for (n, tau) in [(2, 1.0), (8, 0.5), (16, 0.1)] {
        let (lo, hi) = loss_bounds(n, tau);
        println!("N={n:<3} tau={tau:<4} pair losses lie in [{lo:.6}, {hi:.6}]");
    }

    // four images on a circle; each view is a slightly rotated copy
    let n = 4;
    let view = |shift: f64| {
        let rows: Vec<f64> = (0..n)
            .flat_map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_2 + shift;
                l2_normalize(&Tensor::from_vec(vec![a.cos(), a.sin(), 0.3]).unwrap())
                    .unwrap()
                    .into_data()
            })
            .collect();
        Tensor::matrix(n, 3, rows).unwrap()
    };
    let batch = AugmentedBatch::from_views(&view(0.0), &view(0.2), &[vec![0, 0, 1, 1], vec![0, 1, 2, 3], vec![0, 1, 0, 1]])?;
    let cfg = SelfPacedConfig::default();
    let (g0, g1) = cfg.pace_endpoints(n);
    for g in [g0 + 0.1 * (g1 - g0), 0.5 * (g0 + g1), g1] {
        let sp = combined_sp_loss(&batch, g, &cfg)?;
        let w = sp.weight_stats();
        println!(
            "gamma {g:.3}: loss {:.4} (weighted {:.4}, regularizer {:.4}), w mean {:.3} min {:.3} max {:.3}",
            sp.value, sp.weighted, sp.regularization, w.mean, w.min, w.max
        );
    }
    Ok(())
}
