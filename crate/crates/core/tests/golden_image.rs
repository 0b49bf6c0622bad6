//! Byte-exact regression for the heatmap exporter. The checked-in golden
//! was produced by this same renderer (regenerate with
//! `TEMT_WRITE_GOLDEN=1 cargo test -p temt-core --test golden_image`)
//! and audited against the documented value-to-intensity mapping.

use temt_core::analysis::render_pgm;

fn tiny_map() -> (Vec<(f64, f64)>, Vec<f64>, Vec<bool>) {
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for y in 0..3 {
        for x in 0..3 {
            coords.push((x as f64, y as f64));
            values.push((y * 3 + x) as f64);
        }
    }
    let valid = vec![true; 9];
    (coords, values, valid)
}

#[test]
fn exporter_matches_golden_bytes() {
    let (coords, values, valid) = tiny_map();
    let bytes = render_pgm(&values, &coords, &valid, 3).unwrap();
    let golden_path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/tiny_map.pgm");
    if std::env::var_os("TEMT_WRITE_GOLDEN").is_some() {
        std::fs::write(golden_path, &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path).expect("golden file present");
    assert_eq!(bytes, golden, "exporter output diverged from the golden image");
}
