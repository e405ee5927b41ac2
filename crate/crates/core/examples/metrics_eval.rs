//! Overlap and surface-distance metrics on hand-built masks.

use duwmt::metrics::{self, MaskRef, SampleMetrics};

fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Vec<u8> {
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            u8::from((y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        })
        .collect()
}

fn main() -> duwmt::Result<()> {
    let (h, w) = (32, 32);
    let gt = disc(h, w, 16.0, 16.0, 8.0);
    let g = MaskRef::new(&gt, h, w)?;
    println!("shift  dice    jaccard  hd95    asd");
    for shift in [0.0, 1.0, 2.0, 4.0, 8.0] {
        let pred = disc(h, w, 16.0, 16.0 + shift, 8.0);
        let m = SampleMetrics::compute("p", &MaskRef::new(&pred, h, w)?, &g)?;
        println!(
            "{shift:<6} {:.4}  {:.4}   {:.3}   {:.3}",
            m.dice,
            m.jaccard,
            m.hd95.unwrap_or(f64::NAN),
            m.asd.unwrap_or(f64::NAN)
        );
    }

    let empty = vec![0u8; h * w];
    let m = SampleMetrics::compute("empty", &MaskRef::new(&empty, h, w)?, &g)?;
    println!("\nempty prediction: dice {:.1}, hd95 {:?}", m.dice, m.hd95);

    let pred = disc(h, w, 14.0, 18.0, 6.0);
    let d = metrics::surface_distances(&MaskRef::new(&pred, h, w)?, &g)?;
    println!(
        "boundary pixels {} / {}, max directed distance {:.3}",
        d.pred_to_gt.len(),
        d.gt_to_pred.len(),
        d.pred_to_gt.iter().chain(&d.gt_to_pred).cloned().fold(0.0, f64::max)
    );
    Ok(())
}
