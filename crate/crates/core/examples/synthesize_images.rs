//! Synthesize images from the taps of a model and write them as PGMs.
//!
//! cargo run --example synthesize_images -- /tmp/synth-out

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use synmatch::data::pnm::{raster_from_tensor, write};
use synmatch::data::synthetic::{generate_sample, GenConfig};
use synmatch::synthesis::{reduce_feature, synthesize, synthesize_batch};
use synmatch::unet::{UNetConfig, UNetModel};
use synmatch::Tensor;

fn main() -> synmatch::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("synmatch-example-synth"));
    std::fs::create_dir_all(&out).map_err(|e| synmatch::Error::io(&out, e))?;
    let gen = GenConfig::default();
    let images: Vec<Tensor> = (0..4).map(|i| generate_sample(&gen, i).map(|s| s.0)).collect::<Result<_, _>>()?;
    let batch = Tensor::stack(&images)?;

    let model = UNetModel::init(UNetConfig::default(), 0)?;
    let taps = model.forward_with_taps(&batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let synth = synthesize_batch(&taps, &batch, &mut rng)?;

    for i in 0..images.len() {
        let s = synth.images.narrow_batch(i, 1)?.reshape([1, 64, 64])?;
        write(&out.join(format!("{i}-image.pgm")), &raster_from_tensor(&images[i])?)?;
        write(&out.join(format!("{i}-synth.pgm")), &raster_from_tensor(&s)?)?;
        println!("item {i}: alpha {:.3}", synth.alphas[i]);
    }

    // The endpoints give back the reduced taps.
    let t = reduce_feature(&taps.texture.narrow_batch(0, 1)?)?;
    let s = reduce_feature(&taps.shape.narrow_batch(0, 1)?)?;
    println!("alpha=1 vs texture: {:.1e}", synthesize(&t, &s, 1.0)?.max_abs_diff(&t));
    println!("alpha=0 vs shape:   {:.1e}", synthesize(&t, &s, 0.0)?.max_abs_diff(&s));
    println!("wrote {}", out.display());
    Ok(())
}
