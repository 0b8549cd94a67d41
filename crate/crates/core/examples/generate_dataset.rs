//! Generate a small synthetic dataset, then derive the three split kinds.
//!
//! cargo run --example generate_dataset -- /tmp/synth

use std::path::PathBuf;

use synmatch::data::manifest::split_file_name;
use synmatch::data::{build_split, generate_synthetic_dataset, GenConfig, Setting};

fn main() -> synmatch::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("synmatch-example-data"));
    let cfg = GenConfig { n: 40, ..GenConfig::default() };
    let base = generate_synthetic_dataset(&out, &cfg)?;

    let coverage: Vec<f64> = base
        .samples
        .iter()
        .map(|s| {
            let sc = synmatch::data::pnm::read_label(&out.join(s.scribble.as_ref().unwrap())).unwrap();
            sc.data.iter().filter(|&&v| v != synmatch::label::IGNORE).count() as f64 / sc.data.len() as f64
        })
        .collect();
    let mean = coverage.iter().sum::<f64>() / coverage.len() as f64;
    println!("{} samples in {}, mean scribble coverage {:.2}%", base.samples.len(), out.display(), 100.0 * mean);

    for (setting, fraction) in [(Setting::Ssl, 0.1), (Setting::Wsl, 1.0), (Setting::Bsl, 0.1)] {
        let m = build_split(&base, &out, setting, fraction, 0)?;
        let path = out.join(split_file_name(setting, fraction, 0));
        m.save(&path)?;
        let s = m.split.as_ref().unwrap();
        println!(
            "{setting} {fraction}: labeled {} unlabeled {} val {} test {}",
            s.labeled.len(),
            s.unlabeled.len(),
            s.val.len(),
            s.test.len()
        );
    }
    Ok(())
}
