//! Frame-count arithmetic for hierarchical generation: interleaving new
//! frames between existing ones (slow motion) versus appending after them
//! (window expansion), across refinement levels.

use marvid::masking::{hierarchical_expand, GapMode};

fn main() {
    // A 5-frame model fills 3 new frames per gap or per window.
    let k_gap = 3;
    for (mode, name) in [(GapMode::Between, "between"), (GapMode::After, "after")] {
        println!("mode {name}, {k_gap} new frames per slot:");
        for n0 in [2usize, 4] {
            let counts = hierarchical_expand(n0, k_gap, 4, mode).expect("counts");
            let path: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
            println!("  {n0} seeds: {}", path.join(" -> "));
        }
    }

    // Four seeds expanded once in after-mode quadruple the sequence: the
    // count every seed window contributes is k_gap + 1.
    let counts = hierarchical_expand(4, 3, 1, GapMode::After).expect("counts");
    assert_eq!(counts, vec![4, 16]);
    println!("\n4 seeds, one after-mode level: {} frames", counts[1]);

    // Between-mode levels multiply gaps, not frames; the fixed points obey
    // n' = n + (n - 1) * k_gap.
    let counts = hierarchical_expand(2, 3, 3, GapMode::Between).expect("counts");
    let mut n = 2;
    for &c in &counts[1..] {
        n = n + (n - 1) * 3;
        assert_eq!(c, n);
    }
    println!("2 seeds, three between-mode levels: {} frames", counts[3]);
}
