//! Regenerates the bundled benchmark CSV: `cargo run -p tabxai-cli --example generate_data`.

use tabxai::data::write_csv;
use tabxai::synth::bundled_dataset;

pub const ROWS: usize = 5000;
pub const SEED: u64 = 7;

fn main() -> tabxai::Result<()> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/bundled.csv");
    write_csv(&bundled_dataset(ROWS, SEED), &path, "event")?;
    println!("wrote {}", path.display());
    Ok(())
}
