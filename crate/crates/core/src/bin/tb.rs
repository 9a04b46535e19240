//! `tb`: command-line front end for the toolkit.
//!
//! Exit codes: 0 when every assertion passes, 2 when one fails, 1 on
//! configuration or runtime errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nhtb::carleson::{
    jn_equivalence_test, pi2_bound, pi2_telescoping_check, random_adapted_sequence, Pi2Setup, SignOptions,
};
use nhtb::config::{preset, ExperimentConfig, PRESETS};
use nhtb::decoupling::{tangent_equivalence, PartitionSystem};
use nhtb::dyadic::{bad_probability_mc, DyadicSystem, GoodnessParams};
use nhtb::estimator::{expand_pairing, regime_norms, run_experiment, Context};
use nhtb::field::{conjugate_exponent, NormSpace, VectorField};
use nhtb::filtration::Filtration;
use nhtb::haar::{decompose, identity_check, reconstruct};
use nhtb::measure::lebesgue_grid;
use nhtb::output::write_run;
use nhtb::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "tb", version, about = "Non-homogeneous dyadic harmonic analysis experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Source {
    /// Bundled preset name.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Path to an experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (_, Some(p)) => ExperimentConfig::from_file(p)?,
            (Some(name), None) => preset(name)?,
            (None, None) => preset(PRESETS[0])?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Full experiment: expansion, regimes, splits, norms; writes artifacts.
    Run {
        #[command(flatten)]
        src: Source,
        #[arg(long, default_value = "tb-out")]
        out: PathBuf,
    },
    /// Expansion of <g, Tf> against the direct oracle.
    Expand {
        #[command(flatten)]
        src: Source,
    },
    /// Class totals and separated-cell decay.
    Regimes {
        #[command(flatten)]
        src: Source,
    },
    /// Monte Carlo probability that a cube is bad.
    Badprob {
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        d: f64,
        #[arg(long, default_value_t = 32)]
        r: u32,
        #[arg(long, default_value_t = 40)]
        max_excess: u32,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pi_2 telescoping identity and the BMO bound ratio over random g.
    Paraproduct {
        #[command(flatten)]
        src: Source,
        #[arg(long, default_value_t = 20)]
        draws: usize,
    },
    /// Haar identities and exact reconstruction for both trees of a config.
    HaarVerify {
        #[command(flatten)]
        src: Source,
    },
    /// Tangent decoupling ratio on a dyadic grid filtration.
    Decouple {
        /// Number of partitions (levels).
        #[arg(long, default_value_t = 6)]
        levels: usize,
        /// Dimension of the target space l_2^dim.
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long, default_value_t = 4000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Car^2 / Car^1 over random adapted sequences.
    JnTest {
        #[arg(long, default_value_t = 8)]
        levels: usize,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Filtration of a `2^(levels-1)`-point grid on `[0,1)` by the standard
/// dyadic intervals of lengths `2^-(levels-1), ..., 1`.
fn grid_filtration(levels: usize) -> Result<Filtration> {
    if levels == 0 || levels > 20 {
        return Err(Error::InvalidParameter { field: "levels".into(), reason: "must lie in 1..=20".into() });
    }
    let k = levels as i32 - 1;
    let m = lebesgue_grid(1, 1 << k)?;
    let sys = DyadicSystem::standard(1, -k - 4, 4)?;
    let lv: Vec<i32> = (-k..=0).collect();
    Filtration::from_system(&sys, &m, &lv)
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn exec(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Run { src, out } => {
            let cfg = src.load()?;
            let rep = run_experiment(&cfg)?;
            let files = write_run(&out, &rep, &cfg.output)?;
            for a in &rep.assertions {
                println!(
                    "{} {}: {:.3e} (bound {:.3e})",
                    if a.pass { "PASS" } else { "FAIL" },
                    a.name,
                    a.value,
                    a.bound
                );
            }
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(rep.passed())
        }
        Cmd::Expand { src } => {
            let cfg = src.load()?;
            let ctx = Context::build(&cfg)?;
            let (f, g) = ctx.random_fields(cfg.seed);
            let e = expand_pairing(&ctx, &g, &f, 0)?;
            print(&json!({
                "atoms": ctx.m.len(),
                "pairs": e.pairs,
                "total": [e.total.re, e.total.im],
                "oracle": [e.oracle.re, e.oracle.im],
                "rel_err": e.rel_err,
            }));
            Ok(e.rel_err <= 1e-8)
        }
        Cmd::Regimes { src } => {
            let cfg = src.load()?;
            let ctx = Context::build(&cfg)?;
            let (f, g) = ctx.random_fields(cfg.seed);
            let e = expand_pairing(&ctx, &g, &f, 0)?;
            let r = regime_norms(&e, ctx.params.alpha, cfg.trials, rng::derive(cfg.seed, "cells"));
            print(&json!({
                "classes": r.classes,
                "reconciliation_rel_err": r.reconciliation_rel_err,
                "decay_slope": r.decay_slope,
                "decay_threshold": r.decay_threshold,
                "decay": r.decay,
            }));
            Ok(r.reconciliation_rel_err <= 1e-8 && r.decay_slope.map_or(true, |s| s <= r.decay_threshold))
        }
        Cmd::Badprob { dim, alpha, d, r, max_excess, trials, seed } => {
            let p = GoodnessParams::with_search(alpha, d, r, 1.0, 0.1, max_excess)?;
            let rep = bad_probability_mc(dim, &p, trials, seed)?;
            print(&serde_json::to_value(&rep).expect("json"));
            Ok(rep.within_bound)
        }
        Cmd::Paraproduct { src, draws } => {
            let cfg = src.load()?;
            let ctx = Context::build(&cfg)?;
            let s = Pi2Setup {
                t: &ctx.op,
                b1: &ctx.b1,
                b2: &ctx.b2,
                tree_f: &ctx.tf,
                tree_g: &ctx.tg,
                dp: &ctx.sys.dp,
                r: ctx.params.r,
            };
            let pd = conjugate_exponent(cfg.p);
            let all = |_: &nhtb::dyadic::Cube| true;
            let mut ratios = Vec::new();
            let mut tele: f64 = 0.0;
            for i in 0..draws {
                let g = VectorField::random_gaussian(&mut rng::substream(cfg.seed, i as u64), ctx.m.len(), ctx.space.dual());
                tele = tele.max(pi2_telescoping_check(&s, &g)?.max_rel_err);
                ratios.push(pi2_bound(&s, &ctx.m, &g, pd, ctx.params.lambda_bmo, &all, &all)?.ratio);
            }
            let max = ratios.iter().cloned().fold(0.0, f64::max);
            print(&json!({
                "draws": draws,
                "telescope_max_rel_err": tele,
                "ratio_mean": nhtb::stats::mean_stderr(&ratios).0,
                "ratio_max": max,
            }));
            Ok(tele <= 1e-10 && max.is_finite())
        }
        Cmd::HaarVerify { src } => {
            let cfg = src.load()?;
            let ctx = Context::build(&cfg)?;
            let (f, _) = ctx.random_fields(cfg.seed);
            let rf = reconstruct(&decompose(&f, &ctx.tf)?, &ctx.tf)?;
            let recon = rf.max_abs_diff(&f) / f.max_abs();
            let a = identity_check(&ctx.tf, &ctx.b1, &ctx.m)?;
            let b = identity_check(&ctx.tg, &ctx.b2, &ctx.m)?;
            print(&json!({ "reconstruction_rel_err": recon, "tree_f": a, "tree_g": b }));
            let ok = |r: &nhtb::haar::HaarIdentityReport| {
                r.max_abs_integral <= 1e-12 && r.max_norm_err <= 1e-10 && r.subaccretive_violations == 0
            };
            Ok(recon <= 1e-10 && ok(&a) && ok(&b))
        }
        Cmd::Decouple { levels, dim, p, trials, seed } => {
            let filt = grid_filtration(levels)?;
            let space = NormSpace::lq(2.0, dim)?;
            let sys = PartitionSystem::random(filt, space, &mut rng::root(rng::derive(seed, "system")));
            let rep = tangent_equivalence(&sys, p, trials, seed)?;
            print(&serde_json::to_value(&rep).expect("json"));
            Ok(rep.ratio.is_finite() && rep.ratio > 0.0)
        }
        Cmd::JnTest { levels, instances, trials, seed } => {
            let filt = grid_filtration(levels)?;
            let seqs: Vec<_> = (0..instances)
                .map(|i| random_adapted_sequence(&filt, NormSpace::scalar(), 0.5, &mut rng::substream(seed, i as u64)))
                .collect();
            let opts = SignOptions { trials, seed, ..SignOptions::default() };
            let rep = jn_equivalence_test(&filt, &seqs, &[1.0, 2.0], &opts)?;
            print(&json!({
                "levels": levels,
                "instances": instances,
                "ratio_min": rep.ratio_min,
                "ratio_mean": rep.ratio_mean,
                "ratio_max": rep.ratio_max,
                "exact": rep.all_exact,
            }));
            Ok(rep.ratio_max.iter().all(|r| r.is_finite()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
