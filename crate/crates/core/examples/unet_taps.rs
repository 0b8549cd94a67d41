//! Build the U-Net and look at its logits and feature taps.

use synmatch::unet::{UNetConfig, UNetModel};
use synmatch::Tensor;

fn main() -> synmatch::Result<()> {
    for base_channels in [8, 16] {
        let cfg = UNetConfig { base_channels, ..UNetConfig::default() };
        let model = UNetModel::init(cfg, 0)?;
        println!("base {base_channels}: {} parameters", model.parameter_count());
    }
    let model = UNetModel::init(UNetConfig::default(), 0)?;
    let x = Tensor::from_fn([2, 1, 64, 64], |i| ((i % 64) as f32 / 63.0).sin());
    let out = model.forward_with_taps(&x)?;
    println!("logits  {:?}", out.logits.shape());
    println!("texture {:?}", out.texture.shape());
    println!("shape   {:?}", out.shape.shape());
    let preds = model.predict(&x)?;
    println!("untrained prediction histogram {:?}", preds[0].histogram(3));
    match model.forward_with_taps(&Tensor::zeros([1, 1, 60, 60])) {
        Err(e) => println!("60x60 rejected: {e}"),
        Ok(_) => println!("60x60 accepted"),
    }
    Ok(())
}
