//! The two-line demonstration of the whole problem: convolve a constant
//! image with a stride-2 kernel, look at the input gradient, watch the
//! checkerboard appear — then watch both hooks erase it.

use std::path::Path;

use degrid_core::checkpoint::write_json;
use degrid_core::error::{Error, Result};
use degrid_core::metrics::phase_spread;
use degrid_core::render::write_pgm;
use degrid_core::stns;
use degrid_core::tape::{RollSet, Tape, ValueId, PHASE_ROLLS};
use degrid_core::tensor::Tensor;

use crate::ensure_dir;

fn input_gradient(tape: Tape<f64>, x: ValueId, y: ValueId, size: usize) -> Result<Tensor<f64>> {
    let s = tape.sum(y)?;
    let grads = tape.backward(s)?;
    let g = grads.get(x)?.ok_or_else(|| Error::usage("input got no gradient".to_string()))?;
    g.reshape(vec![size, size])
}

/// d(sum(x * k))/dx for a stride-2 convolution, optionally with the
/// roll-averaging gradient hook.
fn conv_gradient(
    image: &Tensor<f64>,
    kernel: &Tensor<f64>,
    hook: Option<RollSet>,
    size: usize,
) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let x = tape.leaf(image.clone());
    let k = tape.constant(kernel.clone());
    let y = tape.conv2d(x, k, None, 2, 0, hook)?;
    input_gradient(tape, x, y, size)
}

/// Same quantity with the forward-side hook: the conv runs on the four
/// rolled copies of its input and the results are averaged, so the smooth
/// gradient falls out of plain differentiation.
fn forward_avg_gradient(
    image: &Tensor<f64>,
    kernel: &Tensor<f64>,
    size: usize,
) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let x = tape.leaf(image.clone());
    let k = tape.constant(kernel.clone());
    let mut acc: Option<ValueId> = None;
    for (dy, dx) in PHASE_ROLLS {
        let rolled = tape.roll2d(x, dy, dx)?;
        let c = tape.conv2d(rolled, k, None, 2, 0, None)?;
        acc = Some(match acc {
            None => c,
            Some(a) => tape.add(a, c)?,
        });
    }
    let y = tape.scale(acc.expect("four rolls"), 0.25)?;
    input_gradient(tape, x, y, size)
}

pub fn run(size: usize, out: &Path) -> Result<()> {
    if size < 2 || size % 2 != 0 {
        return Err(Error::config(format!("size {size} must be even and at least 2")));
    }
    ensure_dir(out)?;

    let image = Tensor::<f64>::ones(vec![1, 1, size, size]);
    let kernel = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, -1.0])?;

    let gradient = conv_gradient(&image, &kernel, None, size)?;
    let backward = conv_gradient(&image, &kernel, Some(RollSet::adjoint()), size)?;
    let forward = forward_avg_gradient(&image, &kernel, size)?;

    stns::write_file(out.join("gradient.stns"), &gradient)?;
    write_pgm(&out.join("gradient.pgm"), &gradient)?;
    write_pgm(&out.join("backward_hook.pgm"), &backward)?;
    write_pgm(&out.join("forward_hook.pgm"), &forward)?;

    for (name, map) in
        [("gradient", &gradient), ("backward_hook", &backward), ("forward_hook", &forward)]
    {
        println!("{name}: phase_spread {:.6}", phase_spread(map)?);
    }

    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        size: usize,
        artifacts: [&'a str; 4],
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            size,
            artifacts: ["gradient.stns", "gradient.pgm", "backward_hook.pgm", "forward_hook.pgm"],
        },
    )?;
    println!("wrote {}", out.join("manifest.json").display());
    Ok(())
}
