//! Regenerates the frozen kernel constructions in `golden/kernels.golden`.
//! Run from the workspace root after an intentional numeric change:
//!
//! ```text
//! cargo run -p dcls-testkit --example freeze_golden
//! ```
//!
//! The conformance suite replays every record through the production
//! constructor and fails on any drift beyond 1e-15 per entry.

use dcls_core::interp::InterpFamily;
use dcls_core::kernelgen::{DclsGeometry, DclsParams};
use dcls_testkit::write_golden;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn random_case(
    rng: &mut ChaCha8Rng,
    family: InterpFamily,
    sizes: &[usize],
    m: usize,
    c_out: usize,
    c_in_g: usize,
) -> (String, InterpFamily, DclsGeometry, DclsParams<f64>) {
    let geom = DclsGeometry::new(sizes, m).expect("valid geometry");
    let mut params: DclsParams<f64> = DclsParams::zeros(&geom, c_out, c_in_g);
    for w in params.weights.data_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    for (a, &s) in sizes.iter().enumerate() {
        let half = (s / 2) as f64;
        for p in params.positions[a].data_mut() {
            *p = rng.gen_range(-half..half - 1.0);
        }
        for sig in params.sigmas[a].data_mut() {
            *sig = rng.gen_range(-0.8..0.8);
        }
    }
    let name = format!("{}_{}d", family.name(), sizes.len());
    (name, family, geom, params)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x601d);
    let cases = vec![
        random_case(&mut rng, InterpFamily::Bilinear, &[7, 7], 3, 2, 1),
        random_case(&mut rng, InterpFamily::Triangle, &[9], 4, 1, 1),
        random_case(&mut rng, InterpFamily::Gauss, &[5, 3, 3], 2, 1, 2),
    ];
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("golden/kernels.golden");
    std::fs::create_dir_all(path.parent().unwrap()).expect("golden dir");
    write_golden(&path, &cases).expect("write golden file");
    println!("wrote {} cases to {}", cases.len(), path.display());
}
