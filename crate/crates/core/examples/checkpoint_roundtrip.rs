//! Save a model with optimizer state and load it back bit for bit.

use synmatch::autodiff::Graph;
use synmatch::data::{load_checkpoint, save_checkpoint};
use synmatch::loss::ce_dice_loss;
use synmatch::optim::{AdamW, AdamWConfig};
use synmatch::label::LabelMap;
use synmatch::unet::{UNetConfig, UNetModel};
use synmatch::Tensor;

fn main() -> synmatch::Result<()> {
    let cfg = UNetConfig { base_channels: 8, ..UNetConfig::default() };
    let mut model = UNetModel::init(cfg, 0)?;
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);

    let x = Tensor::from_fn([1, 1, 32, 32], |i| (i % 7) as f32 / 7.0);
    let y = LabelMap::new(32, 32, (0..1024).map(|i| (i % 3) as u8).collect())?;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, &bound, xv)?;
    let loss = ce_dice_loss(&mut g, out.logits, std::slice::from_ref(&y))?;
    g.backward(loss)?;
    let grads = model.params.take_grads(&mut g, &bound);
    opt.step(&mut model.params, &grads)?;

    let path = std::env::temp_dir().join("synmatch-example.ckpt");
    save_checkpoint(&path, &model, Some(&opt), &serde_json::json!({ "step": 1 }))?;
    let ck = load_checkpoint(&path)?;
    let restored = ck.build_model()?;
    let same = model
        .params
        .iter()
        .zip(restored.params.iter())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    println!("{} tensors, bitwise identical: {same}", model.params.len());
    println!("optimizer step restored: {:?}", ck.optimizer.as_ref().map(|o| o.step));
    println!("same predictions: {}", model.predict(&x)? == restored.predict(&x)?);
    Ok(())
}
