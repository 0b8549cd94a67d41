//! A short SynMatch run on a tiny generated dataset, end to end.
//!
//! cargo run --release --example train_synmatch -- [epochs]

use synmatch::data::manifest::split_file_name;
use synmatch::data::{build_split, generate_synthetic_dataset, GenConfig, Setting};
use synmatch::train::{TrainConfig, Trainer};

fn main() -> synmatch::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let root = std::env::temp_dir().join("synmatch-example-train");
    let base = generate_synthetic_dataset(&root.join("data"), &GenConfig { n: 40, size: 32, ..GenConfig::default() })?;
    let split = build_split(&base, &root.join("data"), Setting::Bsl, 0.25, 0)?;
    let manifest = root.join("data").join(split_file_name(Setting::Bsl, 0.25, 0));
    split.save(&manifest)?;

    let mut cfg = TrainConfig::parse(&format!(
        "manifest = {}\nout_dir = {}\nsetting = bsl\nlabeled_fraction = 0.25\nimage_size = 32\nepochs = {epochs}\niterations_per_epoch = 3\nbatch_labeled = 4\nbatch_unlabeled = 4\nmodel.base_channels = 8\nmodel.depth = 3\noptim.lr = 1e-3",
        manifest.display(),
        root.join("run").display()
    ))?;
    cfg.dump_synth = Some(root.join("run").join("synth"));

    let mut trainer = Trainer::from_config(cfg)?;
    let summary = trainer.fit(|e| {
        println!("epoch {} loss {:.4} masked {:.3} val dsc {:.4}", e.epoch, e.mean_loss, e.mean_masked_fraction, e.val.mean_dsc)
    })?;
    println!("best epoch {} test dsc {:.4}", summary.best_epoch, summary.test.mean_dsc);
    println!("logs in {}", summary.out_dir.display());
    Ok(())
}
