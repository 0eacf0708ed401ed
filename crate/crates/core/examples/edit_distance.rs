//! Levenshtein distance and the normalized edit similarity used for text
//! fidelity.

use onestep_sr::metrics::{levenshtein, ned};

fn main() {
    let pairs = [("kitten", "sitting"), ("abc", "abd"), ("", "abc"), ("glyph", "glyph")];
    for (a, b) in pairs {
        println!(
            "{a:>8} {b:>8}  distance {}  ned {:.4}",
            levenshtein(a.as_bytes(), b.as_bytes()),
            ned(a.as_bytes(), b.as_bytes())
        );
    }
}
