//! Evaluate every training loss on small hand-built density maps, including
//! the two-Dirac optimal-transport sanity case.

use ndarray::{ArrayD, IxDyn};
use ndgrad::Tensor;
use treecount::losses::{
    adversarial_losses, count_loss, ot_loss, total_loss, tv_loss, OtConfig,
};

fn map(values: &[(usize, usize, f64)], h: usize, w: usize) -> Tensor<f64> {
    let mut a = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
    for &(y, x, v) in values {
        a[[y, x]] = v;
    }
    Tensor::param(a)
}

fn main() {
    // counts differ by 2
    let s = map(&[(2, 2, 3.0), (5, 5, 2.0)], 8, 8);
    let g = map(&[(2, 2, 2.0), (6, 6, 1.0)], 8, 8);
    println!("count loss: {}", count_loss(&s, &g).unwrap().value());

    // two unit point masses half the grid apart: entropic OT cost -> 0.25
    let a = map(&[(8, 4, 1.0)], 16, 16);
    let b = map(&[(8, 12, 1.0)], 16, 16);
    let cfg = OtConfig { epsilon: 1e-3, iterations: 100, pool_factor: 1 };
    let (ot, _) = ot_loss(&a, &b, &cfg).unwrap();
    println!("two-Dirac OT cost (expect ~0.25): {:.6}", ot.value());

    let (tv, _) = tv_loss(&a, &b).unwrap();
    println!("two-Dirac TV loss (expect 1.0): {:.6}", tv.value());

    // gradient of the OT cost with respect to the predicted map
    a.zero_grad();
    let (ot, _) = ot_loss(&a, &b, &cfg).unwrap();
    ot.backward();
    let grad = a.grad().unwrap();
    println!(
        "d(OT)/dS at the mass pixel: {:+.4}, at a far empty pixel: {:+.4}",
        grad[[8, 4]],
        grad[[0, 0]]
    );

    let half = Tensor::<f64>::scalar(0.5);
    let tdm_s = Tensor::<f64>::scalar(1.2);
    let tdm_t = Tensor::<f64>::scalar(0.8);
    let (gen, disc) = adversarial_losses(&half, &half, &tdm_s, &tdm_t, 0.1).unwrap();
    println!(
        "undecided discriminator: generator {:.4}, discriminator {:.4} (= 2 ln 2)",
        gen.value(),
        disc.value()
    );

    let total = total_loss(
        &Tensor::<f64>::scalar(1.0),
        &Tensor::<f64>::scalar(2.0),
        &Tensor::<f64>::scalar(3.0),
    );
    println!("total loss of (1, 2, 3): {}", total.value());
}
