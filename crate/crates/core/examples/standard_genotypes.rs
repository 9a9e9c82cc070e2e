//! Regenerate `grammars/alr_standard_genotypes.json`:
//! `cargo run -p lrforge --example standard_genotypes > crates/core/grammars/alr_standard_genotypes.json`

use lrforge::grammar::Grammar;
use lrforge::standard::encode_standard;

fn main() {
    let entries = encode_standard(&Grammar::alr()).expect("every standard optimizer encodes");
    println!("{}", serde_json::to_string_pretty(&entries).expect("serializable"));
}
