//! The deployment cost table for the default configuration, plus the
//! quadratic growth of full attention with frame count that motivates the
//! asymmetric design: plan wide at low resolution, denoise locally.

use marvid::config::RunConfig;
use marvid::cost::{cost_table, CostRow, DEFAULT_MEM_BUDGET_BYTES};

fn print_rows(rows: &[CostRow]) {
    println!(
        "{:<16} {:>10} {:>10} {:>9} {:>8} {:>5}",
        "deployment", "total Mmac", "attn Mmac", "params", "MiB", "fits"
    );
    for r in rows {
        println!(
            "{:<16} {:>10.2} {:>10.2} {:>9} {:>8.2} {:>5}",
            r.name,
            r.total_macs() as f64 / 1e6,
            (r.planner.attn_macs + r.generator.attn_macs) as f64 / 1e6,
            r.planner.params + r.generator.params,
            r.mem_bytes() as f64 / (1024.0 * 1024.0),
            if r.within_budget() { "yes" } else { "NO" }
        );
    }
}

fn main() {
    let cfg = RunConfig::default();
    let g = cfg.geometry;
    let mar = cfg.mar_config();
    let dm = cfg.dm_config();

    println!("cost per generated clip, {} frames:", g.frames);
    let rows = cost_table(
        &mar,
        &dm,
        g.frames,
        (g.high_rows(), g.high_rows()),
        (g.low_rows(), g.low_rows()),
        DEFAULT_MEM_BUDGET_BYTES,
    )
    .expect("cost table");
    print_rows(&rows);

    // Memory scaling in the frame count: full spatio-temporal attention at
    // high resolution crosses the budget first.
    println!("\ntransient+parameter memory by frame count (MiB):");
    println!("{:>6} {:>12} {:>12}", "frames", "symmetric", "asym-both");
    for frames in [5usize, 9, 13, 17] {
        let table = cost_table(
            &mar,
            &dm,
            frames,
            (g.high_rows(), g.high_rows()),
            (g.low_rows(), g.low_rows()),
            DEFAULT_MEM_BUDGET_BYTES,
        )
        .expect("table");
        let mib = |name: &str| {
            table
                .iter()
                .find(|r| r.name == name)
                .map(|r| r.mem_bytes() as f64 / (1024.0 * 1024.0))
                .unwrap()
        };
        println!("{frames:>6} {:>12.2} {:>12.2}", mib("symmetric"), mib("asym-both"));
    }
}
