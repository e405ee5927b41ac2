//! Generates a synthetic corpus, writes it to disk and prints one mask.
//!
//! `cargo run --example gen_data -- [out_dir]`

use duwmt::data::{generate_synthetic, split, Dataset};

fn main() -> duwmt::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("duwmt_gen_data"));
    let samples = generate_synthetic(40, 32, 7)?;
    let manifest = split(&samples, 4, 10, 7, "example")?;
    let ds = Dataset::assemble(samples, manifest)?;
    ds.save(&out)?;
    let m = &ds.manifest;
    println!(
        "wrote {} samples ({} labeled, {} unlabeled, {} test) to {}",
        ds.len(),
        m.train_labeled.len(),
        m.train_unlabeled.len(),
        m.test.len(),
        out.display()
    );

    let first = ds.labeled().next().expect("a labeled sample");
    let mask = first.mask.as_ref().expect("labeled samples carry masks");
    println!("\n{} (foreground '#')", first.id);
    for row in mask.chunks(m.width) {
        println!("{}", row.iter().map(|&v| if v == 1 { '#' } else { '.' }).collect::<String>());
    }

    let reloaded = Dataset::load(&out)?;
    println!("\nreload matches: {}", reloaded == ds);
    Ok(())
}
