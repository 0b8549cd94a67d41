//! Derive scribbles from a dense synthetic label and draw both as text.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use synmatch::data::scribble::derive_scribbles;
use synmatch::data::synthetic::{generate_sample, GenConfig};
use synmatch::label::{LabelMap, IGNORE};

fn draw(m: &LabelMap) {
    for y in (0..m.height).step_by(2) {
        let row: String = (0..m.width)
            .map(|x| match m.get(y, x) {
                IGNORE => ' ',
                0 => '.',
                1 => '1',
                2 => '2',
                _ => '#',
            })
            .collect();
        println!("{row}");
    }
}

fn main() -> synmatch::Result<()> {
    let cfg = GenConfig::default();
    let (_, dense) = generate_sample(&cfg, 5)?;
    let scribble = derive_scribbles(&dense, &mut ChaCha8Rng::seed_from_u64(5));
    draw(&dense);
    println!();
    draw(&scribble);
    let annotated = scribble.data.iter().filter(|&&v| v != IGNORE).count();
    println!("annotated {annotated} of {} pixels", scribble.data.len());
    for class in 0..3u8 {
        let wrong = scribble
            .data
            .iter()
            .zip(&dense.data)
            .filter(|&(&s, &d)| s == class && d != class)
            .count();
        println!("class {class}: {} scribble pixels, {wrong} outside the class", scribble.count(class));
    }
    Ok(())
}
