//! Weak and strong views with CutMix, and how labels follow them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use synmatch::augment::{apply_to_label, AugmentationRecord, mix_batch, strong_view, weak_view, AugmentParams, Mix, MixMode};
use synmatch::data::synthetic::{generate_sample, GenConfig};

fn main() -> synmatch::Result<()> {
    let gen = GenConfig::default();
    let samples: Vec<_> = (0..4).map(|i| generate_sample(&gen, i)).collect::<Result<_, _>>()?;
    let params = AugmentParams { mix_prob: 1.0, mix_mode: MixMode::Cutmix, ..AugmentParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut weak = Vec::new();
    let mut strong = Vec::new();
    let mut records = Vec::new();
    for (img, _) in &samples {
        let (w, rec) = weak_view(img, &params, &mut rng)?;
        let (s, srec) = strong_view(img, Some(&rec), &params, &mut rng)?;
        weak.push(w);
        strong.push(s);
        records.push(srec);
    }
    let mixed = mix_batch(&strong, &mut records, &params, &mut rng)?;

    for (i, rec) in records.iter().enumerate() {
        let partner = match rec.mix {
            Some(Mix::CutMix { partner, area }) => {
                println!("item {i}: cutmix with {partner}, box {}x{}", area.height, area.width);
                Some(partner)
            }
            Some(Mix::Mixup { partner, lambda }) => {
                println!("item {i}: mixup with {partner}, lambda {lambda:.2}");
                Some(partner)
            }
            None => None,
        };
        // Labels are carried into the view frame, then take the partner's
        // view-frame labels inside the box.
        let partner_view = match partner {
            Some(j) => {
                let unmixed = AugmentationRecord { mix: None, ..records[j].clone() };
                Some(apply_to_label(&unmixed, &samples[j].1, None)?)
            }
            None => None,
        };
        let label = apply_to_label(rec, &samples[i].1, partner_view.as_ref())?;
        println!(
            "  weak range [{:.2}, {:.2}], strong-mixed range [{:.2}, {:.2}], label histogram {:?}",
            min(weak[i].data()),
            max(weak[i].data()),
            min(mixed[i].data()),
            max(mixed[i].data()),
            label.histogram(3)
        );
    }
    Ok(())
}

fn min(v: &[f32]) -> f32 {
    v.iter().copied().fold(f32::INFINITY, f32::min)
}

fn max(v: &[f32]) -> f32 {
    v.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}
