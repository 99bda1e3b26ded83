//! `sde-inspect`: forward-process tables and image snapshots.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use driftrec::io::{read_image, write_image};
use driftrec::jpeg::{compress_decompress, JpegConfig};
use driftrec::rng::{normal_like, rng_from_seed};
use driftrec::sde::SdeSettings;

#[derive(serde::Serialize)]
struct ProfileRow {
    kind: &'static str,
    t: f64,
    mean_weight: f64,
    std: f64,
    diffusion: f64,
    drift_rate: f64,
}

/// One row per (kind, t) on `points` equidistant times of `[t_eps, T]`.
pub fn profile_csv(settings: &[SdeSettings], points: usize, out: Option<&Path>) -> Result<()> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for s in settings {
        let sde = s.build()?;
        for (t, mean_weight, std) in sde.profile(points)? {
            w.serialize(ProfileRow {
                kind: s.kind.name(),
                t,
                mean_weight,
                std,
                diffusion: sde.diffusion(t),
                drift_rate: sde.drift_rate(t),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Snapshots `x_t = μ_t + σ_t z` of one image drifting toward its JPEG
/// version, with a single noise draw `z` shared by all frames and kinds.
pub fn write_frames(settings: &[SdeSettings], image: &Path, qf: u8, dir: &Path, frames: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let x0 = read_image(image)?;
    let y = compress_decompress(&x0, &JpegConfig::new(qf))?;
    let z = normal_like(&x0, &mut rng_from_seed(seed));
    write_image(&dir.join("clean.ppm"), &x0)?;
    write_image(&dir.join(format!("jpeg_qf{qf}.ppm")), &y)?;
    for s in settings {
        let sde = s.build()?;
        let n = frames.max(2);
        for i in 0..n {
            let t = sde.t_eps() + (sde.t_max() - sde.t_eps()) * i as f64 / (n - 1) as f64;
            let mut x = sde.mean(&x0, &y, t)?;
            x.axpy(sde.std(t)?, &z)?;
            write_image(&dir.join(format!("{}_t{t:.3}.ppm", s.kind.name())), &x.clamped(0.0, 1.0))?;
        }
    }
    Ok(())
}
