//! Pseudo labels from one forward pass and the masked loss at several
//! thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synmatch::autodiff::Graph;
use synmatch::loss::{pseudo_supervised_loss, PseudoLabelBatch};
use synmatch::Tensor;

fn main() -> synmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Teacher logits with a wide spread of confidences.
    let teacher = Tensor::from_fn([2, 3, 16, 16], |_| rng.gen_range(-4.0f32..4.0));
    let student = Tensor::from_fn([2, 3, 16, 16], |_| rng.gen_range(-1.0f32..1.0));
    let targets = PseudoLabelBatch::from_logits(&teacher)?;

    println!("tau   masked  loss      |grad|");
    for tau in [0.0, 0.5, 0.8, 0.95, 1.01] {
        let mut g = Graph::new();
        let logits = g.param(student.clone());
        let loss = pseudo_supervised_loss(&mut g, logits, &targets, tau)?;
        g.backward(loss)?;
        let grad = g.grad(logits).map(|t| t.data().iter().map(|v| v * v).sum::<f32>().sqrt()).unwrap_or(0.0);
        println!("{tau:<5} {:.3}   {:.5}   {grad:.5}", targets.masked_fraction(tau), g.value(loss).data()[0]);
    }
    Ok(())
}
