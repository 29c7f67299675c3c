//! Dataset generation: deterministic shapes classification set with the
//! normalization stats recorded in its manifest.

use std::path::Path;

use degrid_core::dataset;
use degrid_core::error::Result;

use crate::ensure_dir;

pub fn run(classes: usize, count: usize, image_size: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = dataset::generate(classes, count, image_size, seed)?;
    ensure_dir(out)?;
    dataset::save(out, &ds)?;
    let m = &ds.manifest;
    println!(
        "wrote {} samples ({} classes, {}px, seed {}) to {}",
        m.count,
        m.classes,
        m.image_size,
        m.seed,
        out.display()
    );
    println!("normalization mean {:?} std {:?}", m.mean, m.std);
    Ok(())
}
