//! Pivots a rate CSV (`N,statistic,value,stderr`) into whitespace columns
//! for gnuplot: `N w2_sq w2_sq_se price_gap_sq price_gap_sq_se`, one row
//! per N. Missing entries print as `NaN`.
//!
//! cargo run --example rate_columns -- out/experiment-convergence-seed2024-rate.csv

use std::collections::BTreeMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).ok_or("usage: rate_columns <rate.csv>")?;
    let mut rows: BTreeMap<u64, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for rec in csv::Reader::from_path(&path)?.records() {
        let rec = rec?;
        rows.entry(rec[0].parse()?)
            .or_default()
            .insert(rec[1].to_string(), (rec[2].parse()?, rec[3].parse()?));
    }
    let stats = ["w2_sq", "price_gap_sq"];
    println!("# N {}", stats.map(|s| format!("{s} {s}_se")).join(" "));
    for (n, by) in &rows {
        let cols: Vec<String> = stats
            .iter()
            .map(|s| by.get(*s).map_or("NaN NaN".into(), |(v, e)| format!("{v:.6e} {e:.6e}")))
            .collect();
        println!("{n} {}", cols.join(" "));
    }
    Ok(())
}
