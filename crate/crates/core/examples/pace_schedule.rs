//! The pace `γ` over training for several exponents `p`.

use spcon::self_paced::{loss_bounds, pace_schedule};

fn main() {
    let (start, end) = loss_bounds(16, 0.1);
    let max_epoch = 10;
    print!("epoch");
    let ps = [0.5, 1.0, 2.0];
    for p in ps {
        print!("  p={p:<5}");
    }
    println!();
    for e in 0..=max_epoch {
        print!("{e:>5}");
        for p in ps {
            print!("  {:>7.3}", pace_schedule(start, end, p, e, max_epoch));
        }
        println!();
    }
}
