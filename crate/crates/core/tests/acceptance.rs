//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use common::{diverged_model, filter_pool, forced_think_emitter, random_dataset};
use ple_core::leakage::{filter_no_think_candidates, run_demo, DemoConfig, ReflectiveLexicon, DEFAULT_MAX_LEN};
use ple_core::model::*;
use ple_core::theory::*;
use ple_core::tokenizer::{BOS, CTRL_NOTHINK, CTRL_THINK, EOS};
use ple_core::trainer::*;
use ple_core::Route;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, format!("took {:.1}s, budget {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let opts = CheckOptions {
        seeds: 20,
        ..Default::default()
    };
    let recs = run_family(CheckFamily::Gradient, &opts).map_err(e)?;
    let worst = recs.iter().map(|r| r.measured).fold(0.0, f64::max);
    ensure(recs.len() == 20 && recs.iter().all(|r| r.pass), format!("max relative error {worst:.3e}"))?;
    within(start, Duration::from_secs(120))?;
    Ok(format!("20 seeds, max relative error {worst:.2e}"))
}

fn exact_decoupling() -> Outcome {
    let recs = run_family(CheckFamily::Decoupling, &CheckOptions::default()).map_err(e)?;
    ensure(recs.iter().all(|r| r.pass), "inactive expert received a nonzero gradient")?;
    let m = diverged_model(16, 3);
    let data = random_dataset(16, 20, 3);
    for r in Route::BOTH {
        let only: Vec<ChatExample> = data.iter().filter(|x| x.mode == r).cloned().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        };
        let (trained, _) = train(m.clone(), &only, &cfg).map_err(e)?;
        let a = m.block_flat(Block::Expert(r.other()));
        let b = trained.block_flat(Block::Expert(r.other()));
        ensure(
            a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
            format!("{} training moved the other expert", r.name()),
        )?;
    }
    Ok(format!("{} seeds bitwise zero; single-mode training leaves the other expert unchanged", recs.len()))
}

fn gradient_decomposition() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let m = diverged_model(16, seed);
        let data = random_dataset(16, 3 + seed as usize, seed);
        let (_, joint) = joint_objective_grad(&m, &data, LossReduction::ExampleMean).map_err(e)?;
        let pi = mode_fractions(&data).map_err(e)?;
        let pools = split_by_mode(&data);
        for s in 0..joint.len() {
            let mut sum = vec![0.0; joint.segment(s).len()];
            for r in Route::BOTH {
                if pools[r.index()].is_empty() {
                    continue;
                }
                let (_, g) = mode_loss_and_grad(&m, &pools[r.index()], LossReduction::ExampleMean).map_err(e)?;
                for (acc, v) in sum.iter_mut().zip(g.segment(s).data()) {
                    *acc += pi[r.index()] * v;
                }
            }
            for (a, b) in sum.iter().zip(joint.segment(s).data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.3e}"))?;
    Ok(format!("10 random datasets, max deviation {worst:.2e}"))
}

fn hessian_blocks() -> Outcome {
    let start = Instant::now();
    let opts = CheckOptions {
        seeds: 5,
        probes: 64,
        ..Default::default()
    };
    let mut cross: f64 = 0.0;
    let mut b0b0 = f64::INFINITY;
    let mut ab0 = f64::INFINITY;
    for seed in 0..opts.seeds as u64 {
        let (ple, b0, b1) = tiny_audit_fixture(seed).map_err(e)?;
        let audit = hessian_block_audit(&ple, &b0, &b1, opts.probes, seed).map_err(e)?;
        ensure(audit.beta0_beta1.samples.len() >= 64, "fewer than 64 probe pairs")?;
        cross = cross.max(audit.beta0_beta1.max_abs);
        b0b0 = b0b0.min(audit.beta0_beta0.max_abs);
        ab0 = ab0.min(audit.alpha_beta0.max_abs);
    }
    let detail = format!("cross {cross:.2e}, controls beta0-beta0 {b0b0:.2e} alpha-beta0 {ab0:.2e}");
    ensure(cross <= 1e-6 && b0b0 > 1e-4 && ab0 > 1e-4, detail.clone())?;
    within(start, Duration::from_secs(300))?;
    Ok(detail)
}

fn identical_init() -> Outcome {
    for seed in 0..5 {
        let dense = ModelParams::init_dense(&PleConfig::tiny(24), seed).map_err(e)?;
        let ple = ModelParams::clone_from_dense(&dense).map_err(e)?;
        let tokens = [BOS, 7, 8, 9, CTRL_THINK, 10, 11];
        let gap = route_logit_gap(&ple, &tokens).map_err(e)?.into_iter().fold(0.0, f64::max);
        ensure(gap == 0.0, format!("gap {gap:e}"))?;
        let d = forward(&dense, &tokens, Route::NoThink).map_err(e)?;
        let p = forward(&ple, &tokens, Route::NoThink).map_err(e)?;
        ensure(
            d.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "route-0 logits differ from the dense source",
        )?;
    }
    Ok("5 seeds, gap 0.0, route-0 logits bitwise equal".into())
}

fn specialization_trajectory() -> Outcome {
    let m = diverged_model(16, 13);
    let data: Vec<ChatExample> = (0..100)
        .map(|i| {
            let mode = if i % 2 == 0 { Route::NoThink } else { Route::Think };
            let t = 6 + (i * 7) % 10;
            ChatExample::new(vec![BOS, t], vec![6 + (t + 3) % 10, EOS], mode).unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 1,
        ..Default::default()
    };
    let (trained, log) = train(m, &data, &cfg).map_err(e)?;
    ensure(log.records.len() == 100, "expected 50 paired steps")?;
    let residual = log.identity_residual(&trained).map_err(e)?;
    ensure(residual <= 1e-10, format!("residual {residual:.3e}"))?;
    Ok(format!("T = 50 paired steps, max residual {residual:.2e}"))
}

fn quadratic_closed_forms() -> Outcome {
    let start = Instant::now();
    let fams = [
        CheckFamily::DenseOptimum,
        CheckFamily::ConflictGap,
        CheckFamily::EqualCurvature,
        CheckFamily::Dominance,
    ];
    let recs = run_checks(&fams, &CheckOptions::default()).map_err(e)?;
    let failed: Vec<String> = recs.iter().filter(|r| !r.pass).map(|r| format!("{}#{}", r.check, r.instance)).collect();
    ensure(recs.len() == 400 && failed.is_empty(), format!("failed: {failed:?}"))?;
    within(start, Duration::from_secs(60))?;
    Ok("4 families x 100 instances".into())
}

fn interference() -> Outcome {
    let recs = run_family(CheckFamily::Interference, &CheckOptions::default()).map_err(e)?;
    let failed = recs.iter().filter(|r| !r.pass).count();
    ensure(recs.len() == 100 && failed == 0, format!("{failed} inconsistent instances"))?;
    Ok("100 instances consistent".into())
}

fn routing_contrast() -> Outcome {
    let m = diverged_model(16, 21);
    let ex = ChatExample::new(vec![BOS, 7, 8], vec![9, 10, EOS], Route::Think).map_err(e)?;
    let n = ex.lm_triplet().0.len();
    let mut worst: f64 = 0.0;
    for r in Route::BOTH {
        let ex = ChatExample { mode: r, ..ex.clone() };
        let (_, gt) = token_level_route_gradients(&m, &ex, &vec![r; n], LossReduction::ExampleMean).map_err(e)?;
        let (_, gs) = mode_loss_and_grad(&m, std::slice::from_ref(&ex), LossReduction::ExampleMean).map_err(e)?;
        worst = worst.max(gt.max_abs_diff(&gs));
    }
    ensure(worst <= 1e-12, format!("constant-route deviation {worst:.3e}"))?;
    let alt: Vec<Route> = (0..n).map(|i| if i % 2 == 0 { Route::NoThink } else { Route::Think }).collect();
    let (_, g) = token_level_route_gradients(&m, &ex, &alt, LossReduction::ExampleMean).map_err(e)?;
    for r in Route::BOTH {
        let norm: f64 = m.segments_in(Block::Expert(r)).iter().map(|&s| g.segment(s).norm()).sum();
        ensure(norm > 0.0, format!("{} expert empty under alternating routes", r.name()))?;
    }
    Ok(format!("constant-route deviation {worst:.2e}; alternating routes reach both experts"))
}

fn route_lock() -> Outcome {
    let m = forced_think_emitter(16, 4);
    let prompt = [BOS, 7, 8, CTRL_NOTHINK];
    let g = generate(
        &m,
        &prompt,
        &GenerateOptions {
            max_new: 12,
            ..Default::default()
        },
    )
    .map_err(e)?;
    let emitted = g.tokens.iter().filter(|&&t| t == CTRL_THINK).count();
    ensure(emitted > 0, "model did not emit the think control token")?;
    ensure(g.route == Route::NoThink, "route changed")?;
    ensure(g.audit.calls.iter().all(|c| c.route == Route::NoThink), "a think expert was called")?;
    let fed = prompt.len() + g.tokens.len() - 1;
    let per_token = g.audit.token_evaluations() as f64 / fed as f64;
    ensure(
        g.audit.token_evaluations() == fed * m.config().n_layers,
        format!("{per_token} expert calls per token"),
    )?;
    Ok(format!("{emitted} think tokens emitted, all calls route 0, {per_token} calls per token"))
}

fn linearization() -> Outcome {
    let opts = CheckOptions::default();
    let recs = run_family(CheckFamily::Linearization, &opts).map_err(e)?;
    let worst = recs.iter().map(|r| r.measured).fold(0.0, f64::max);
    let dense = ModelParams::init_dense(&PleConfig::tiny(16), 0).map_err(e)?;
    let cloned = ModelParams::clone_from_dense(&dense).map_err(e)?;
    let dir = random_last_expert_direction(&cloned, 0);
    let affine = linearization_residual(&cloned, &[BOS, 6, 7, 8], &dir, &[0.1], Downstream::LmHeadOnly, 1.0).map_err(e)?;
    let affine = affine[0].residual_norm;
    ensure(recs.iter().all(|r| r.pass), format!("worst halving ratio {worst:.3}"))?;
    ensure(affine <= 1e-10, format!("affine residual {affine:.3e}"))?;
    Ok(format!("worst halving ratio {worst:.3} over {} seeds, affine residual {affine:.1e}", recs.len()))
}

fn end_to_end_demo() -> Outcome {
    let start = Instant::now();
    let out = run_demo(&DemoConfig::default()).map_err(e)?;
    let last = out.last();
    let (t, n) = (&last.think, &last.no_think);
    println!(
        "    ple   after {} epochs: think acc {:.3} len {:.2} refl {:.2} | no-think acc {:.3} len {:.2} refl {:.3}",
        out.history.len(),
        t.accuracy,
        t.mean_length,
        t.refl_per_answer,
        n.accuracy,
        n.mean_length,
        n.refl_per_answer
    );
    if let Some([b0, b1]) = &out.baseline {
        println!(
            "    dense baseline (reported only): think acc {:.3} len {:.2} refl {:.2} | no-think acc {:.3} len {:.2} refl {:.3}",
            b1.accuracy, b1.mean_length, b1.refl_per_answer, b0.accuracy, b0.mean_length, b0.refl_per_answer
        );
    }
    ensure(out.reached_target, format!("think accuracy {:.3} below 0.95", t.accuracy))?;
    ensure(n.refl_per_answer <= 0.05, format!("no-think refl {:.3}", n.refl_per_answer))?;
    ensure(
        n.mean_length <= 0.5 * t.mean_length,
        format!("no-think length {:.2} vs think {:.2}", n.mean_length, t.mean_length),
    )?;
    ensure(n.accuracy >= 0.9, format!("no-think accuracy {:.3}", n.accuracy))?;
    within(start, Duration::from_secs(1800))?;
    Ok(format!("trained in {:.0}s", start.elapsed().as_secs_f64()))
}

fn filter_pipeline() -> Outcome {
    let (pool, expected) = filter_pool();
    let out = filter_no_think_candidates(&pool, DEFAULT_MAX_LEN, &ReflectiveLexicon::default()).map_err(e)?;
    ensure(out.kept.len() == 100, format!("kept {}", out.kept.len()))?;
    let clean: Vec<_> = pool.iter().zip(&expected).filter(|(_, x)| x.is_none()).map(|(c, _)| c.clone()).collect();
    ensure(out.kept == clean, "kept set differs from the clean candidates")?;
    let mismatched = out.audit.iter().zip(&expected).filter(|(a, x)| a.reason != **x).count();
    ensure(mismatched == 0, format!("{mismatched} reasons differ from construction"))?;
    Ok("300 candidates, 100 kept, all reasons match".into())
}

fn persistence() -> Outcome {
    let m = diverged_model(20, 6);
    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("model.ple");
    save_checkpoint(&m, &path).map_err(e)?;
    let loaded = load_checkpoint(&path).map_err(e)?;
    let again = dir.path().join("again.ple");
    save_checkpoint(&loaded, &again).map_err(e)?;
    let (a, b) = (std::fs::read(&path).map_err(e)?, std::fs::read(&again).map_err(e)?);
    ensure(a == b, "re-saved bytes differ")?;
    let tokens = [BOS, 7, 8, CTRL_THINK, 9, 10];
    for r in Route::BOTH {
        let x = forward(&m, &tokens, r).map_err(e)?;
        let y = forward(&loaded, &tokens, r).map_err(e)?;
        ensure(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "logits differ")?;
    }
    Ok(format!("{} bytes identical, logits bitwise equal", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 14] = [
        ("gradient oracle", gradient_oracle),
        ("exact expert decoupling", exact_decoupling),
        ("gradient decomposition", gradient_decomposition),
        ("hessian block structure", hessian_blocks),
        ("identical-init route equivalence", identical_init),
        ("specialization trajectory", specialization_trajectory),
        ("quadratic closed forms", quadratic_closed_forms),
        ("interference criterion", interference),
        ("sequence vs token routing", routing_contrast),
        ("route-lock generation", route_lock),
        ("linearization scaling", linearization),
        ("end-to-end synthetic demo", end_to_end_demo),
        ("filter pipeline", filter_pipeline),
        ("bit-exact persistence", persistence),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
