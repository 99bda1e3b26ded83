//! `verify`: fast numerical self-checks of the installed build.

use driftrec::field::ImageField;
use driftrec::io::Checkpoint;
use driftrec::jpeg::{qf_to_tables, CHROMA_BASE, LUMA_BASE};
use driftrec::metrics::psnr;
use driftrec::oracle::GaussianWorld;
use driftrec::sde::{SdeConfig, SdeKind};

type Check = (String, Result<(), String>);

fn within(name: &str, got: f64, want: f64, rel: f64) -> Result<(), String> {
    let err = (got - want).abs() / want.abs().max(1e-300);
    if err < rel {
        Ok(())
    } else {
        Err(format!("{name}: {got} vs {want} (rel. err {err:.2e})"))
    }
}

fn sde_checks(kind: SdeKind) -> Result<(), String> {
    let sde = SdeConfig::reference(kind).map_err(|e| e.to_string())?;
    within("sigma(T)", sde.std(sde.t_max()).map_err(|e| e.to_string())?, sde.sigma_max(), 1e-6)?;
    // Mean weight against RK4 on dw/dt = -γF(t) w.
    let n = 4000;
    let h = sde.t_max() / n as f64;
    let mut w = 1.0;
    for i in 0..n {
        let t = i as f64 * h;
        let f = |t: f64, w: f64| -sde.drift_rate(t) * w;
        let k1 = f(t, w);
        let k2 = f(t + h / 2.0, w + h / 2.0 * k1);
        let k3 = f(t + h / 2.0, w + h / 2.0 * k2);
        let k4 = f(t + h, w + h * k3);
        w += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    within("mean weight at T", sde.mean_weight(sde.t_max()), w, 1e-8)?;
    let t = 0.5;
    let quad = sde.variance_by_quadrature(t).map_err(|e| e.to_string())?;
    within("variance at 0.5", sde.variance(t).map_err(|e| e.to_string())?, quad, 1e-4)
}

fn score_check() -> Result<(), String> {
    let world = GaussianWorld::eight_dim();
    let sde = SdeConfig::reference(SdeKind::Ouve).map_err(|e| e.to_string())?;
    let y = ImageField::from_fn(2, 2, 2, |c, i, j| 0.1 * (c + 2 * i + 4 * j) as f64 - 0.3);
    let x = ImageField::from_fn(2, 2, 2, |c, i, j| 0.05 * (3 * c + i + j) as f64);
    let t = 0.4;
    let score = world.oracle_score(&x, &y, t, &sde).map_err(|e| e.to_string())?;
    let h = 1e-5;
    for d in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_mut_slice()[d] += h;
        minus.as_mut_slice()[d] -= h;
        let lp = world.log_density(&plus, &y, t, &sde).map_err(|e| e.to_string())?;
        let lm = world.log_density(&minus, &y, t, &sde).map_err(|e| e.to_string())?;
        within(&format!("score[{d}]"), score.as_slice()[d], (lp - lm) / (2.0 * h), 1e-5)?;
    }
    Ok(())
}

fn jpeg_check() -> Result<(), String> {
    let (l, c) = qf_to_tables(50).map_err(|e| e.to_string())?;
    if l != LUMA_BASE || c != CHROMA_BASE {
        return Err("qf 50 tables differ from the base tables".into());
    }
    let a = ImageField::filled(3, 8, 8, 0.3);
    within("psnr", psnr(&a, &a.map(|v| v + 0.1)).map_err(|e| e.to_string())?, 20.0, 1e-9)
}

fn checkpoint_check(ckpt: &Checkpoint) -> Result<(), String> {
    if !(ckpt.params.weights.all_finite() && ckpt.params.ema_shadow.all_finite()) {
        return Err("checkpoint holds non-finite parameters".into());
    }
    let net = ckpt.network().map_err(|e| e.to_string())?;
    let path = std::env::temp_dir().join(format!("driftrec-verify-{}.ckpt", std::process::id()));
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string());
    let _ = std::fs::remove_file(&path);
    let back = back?;
    let m = net.spec().size_multiple() * 2;
    let x = ImageField::from_fn(3, m, m, |c, i, j| 0.5 + 0.3 * ((c + i * j) as f64).sin());
    let a = net.forward(&ckpt.params.ema_shadow, &x, &x, 0.5).map_err(|e| e.to_string())?;
    let b = net.forward(&back.params.ema_shadow, &x, &x, 0.5).map_err(|e| e.to_string())?;
    if a != b {
        return Err("save/load round trip changed the network output".into());
    }
    Ok(())
}

/// Run all checks, print one line per check, and report overall success.
pub fn run(ckpt: Option<&Checkpoint>) -> bool {
    let mut checks: Vec<Check> = SdeKind::ALL
        .iter()
        .map(|&k| (format!("sde {}", k.name()), sde_checks(k)))
        .collect();
    checks.push(("oracle score vs finite differences".into(), score_check()));
    checks.push(("jpeg tables and psnr".into(), jpeg_check()));
    if let Some(c) = ckpt {
        checks.push(("checkpoint round trip".into(), checkpoint_check(c)));
    }
    let mut ok = true;
    for (name, result) in &checks {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                ok = false;
                println!("FAIL {name}: {e}");
            }
        }
    }
    ok
}
