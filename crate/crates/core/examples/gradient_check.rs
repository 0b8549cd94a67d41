//! Finite-difference check of every differentiable primitive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use synmatch::autodiff::gradcheck::{random_tensor, GradCheck};

fn main() -> synmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[2, 4, 6, 6], &mut rng);
    let w = random_tensor(&[3, 4, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let gamma = random_tensor(&[4], &mut rng);
    let beta = random_tensor(&[4], &mut rng);
    let targets: Vec<u8> = (0..2 * 4).map(|i| (i % 3) as u8).collect();
    let ones = vec![1.0f32; targets.len()];
    let check = GradCheck::default();

    let conv = check.run(&[x.clone(), w.clone(), b], &[true; 3], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))?;
    let norm = check.run(&[x.clone(), gamma, beta], &[true; 3], |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5))?;
    let pool = check.run(&[x.clone()], &[true], |g, v| g.max_pool2(v[0]))?;
    let up = check.run(&[x.clone()], &[true], |g, v| g.upsample_bilinear2(v[0]))?;
    let relu = check.run(&[x.clone()], &[true], |g, v| Ok(g.relu(v[0])))?;
    let soft = check.run(&[x.clone()], &[true], |g, v| g.softmax_channels(v[0]))?;
    // Few pixels: the losses are f32 scalars, and their rounding would
    // otherwise dominate the central difference.
    let logits = random_tensor(&[2, 3, 2, 2], &mut rng);
    let ce = check.run(&[logits.clone()], &[true], |g, v| g.cross_entropy(v[0], &targets, &ones, 8.0))?;
    let dice = check.run(&[logits], &[true], |g, v| g.soft_dice(v[0], &targets, &ones, 1.0))?;

    for (name, reports) in [
        ("conv2d", conv),
        ("group_norm", norm),
        ("max_pool2", pool),
        ("upsample", up),
        ("relu", relu),
        ("softmax", soft),
        ("cross_entropy", ce),
        ("soft_dice", dice),
    ] {
        let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
        println!("{name:<14} worst relative error {worst:.2e}");
    }
    Ok(())
}
