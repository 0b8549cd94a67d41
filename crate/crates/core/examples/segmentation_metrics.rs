//! Dice and average surface distance on hand-drawn masks, including the
//! empty-mask conventions.

use synmatch::label::LabelMap;
use synmatch::metrics::{aggregate, average_surface_distance, dice_score, score_sample, METRICS_HEADER};

fn square(size: usize, y0: usize, x0: usize, side: usize, class: u8) -> LabelMap {
    let mut m = LabelMap::filled(size, size, 0);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(y, x, class);
        }
    }
    m
}

fn main() -> synmatch::Result<()> {
    let gt = square(16, 4, 4, 6, 1);
    for shift in 0..4 {
        let pred = square(16, 4, 4 + shift, 6, 1);
        let asd = average_surface_distance(&pred, &gt, 1)?;
        println!("shift {shift}: dsc {:.4} asd {:.4}", dice_score(&pred, &gt, 1)?, asd.value);
    }

    let empty = LabelMap::filled(16, 16, 0);
    println!("both empty: dsc {} asd {:?}", dice_score(&empty, &empty, 1)?, average_surface_distance(&empty, &empty, 1)?);
    println!("one empty:  dsc {} asd {:?}", dice_score(&empty, &gt, 1)?, average_surface_distance(&empty, &gt, 1)?);

    let scores = vec![score_sample(&gt, &gt, 3)?, score_sample(&square(16, 5, 5, 6, 1), &gt, 3)?];
    let row = aggregate(&scores, 0, "demo")?;
    println!("{METRICS_HEADER}\n{}", row.csv_line());
    Ok(())
}
