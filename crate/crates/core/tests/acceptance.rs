//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.

mod common;

use std::time::Instant;

use attndb::attention::{begin_capture_with, AttentionMapSet};
use attndb::backend::{add_noise, groups, toy, toy_backend, DiffusionBackend, NoiseSchedule, ToyBackend, ToyConfig};
use attndb::concept::ConceptSpec;
use attndb::data::{load_concept_images, write_synthetic_concept, ImageSet};
use attndb::evaluation::{identity_score, load_prompt_suite, text_alignment_score, Embedder};
use attndb::objectives::{attention_reg_loss, diffusion_loss, AttentionRegularizer, NoisePair, RegWeights};
use attndb::tensor::Tensor;
use attndb::trainer::{baseline_plan, default_schedule, run_full, StagePlan, TrainOptions, TrainedArtifacts};
use attndb::Result;
use common::*;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schedule_fidelity() -> Outcome {
    let expected = [(1e-3, 60, 0.1, 0.0), (2e-5, 100, 2.0, 5.0), (2e-6, 500, 2.0, 5.0)];
    let plans = default_schedule();
    let mut ok = plans.len() == 3;
    for (plan, (lr, steps, lm, ls)) in plans.iter().zip(expected) {
        ok &= plan.learning_rate == lr
            && plan.steps == steps
            && plan.batch_size == 8
            && plan.reg_weights == RegWeights { lambda_mu: lm, lambda_sigma: ls };
    }
    let base: StagePlan = baseline_plan();
    ok &= base.learning_rate == 2e-6 && base.steps == 660 && base.batch_size == 8 && base.reg_weights.is_zero();
    check(ok, format!("3 stages + baseline ({} steps at {:e})", base.steps, base.learning_rate))
}

fn reg_oracle_equivalence() -> Outcome {
    let mut rng = seeded(11);
    let mut worst: f64 = 0.0;
    for _ in 0..250 {
        let set = random_mapset(&mut rng);
        let (lm, ls) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let got = attention_reg_loss(&set, RegWeights { lambda_mu: lm, lambda_sigma: ls }).map_err(|e| e.to_string())?;
        let want = reg_oracle(&set, lm, ls);
        if want != 0.0 || got != 0.0 {
            worst = worst.max(rel_err(got, want));
        }
    }
    check(worst < 1e-12, format!("250 map sets, worst relative error {worst:.2e}"))
}

fn reg_gradient_check() -> Outcome {
    let mut rng = seeded(12);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let set = random_mapset(&mut rng);
        let weights = RegWeights { lambda_mu: rng.random_range(0.5..5.0), lambda_sigma: rng.random_range(0.5..5.0) };
        let reg = AttentionRegularizer::new(weights);
        let analytic = reg.loss_and_grad(&set).map_err(|e| e.to_string())?.grads;
        let loss_at = |s: &AttentionMapSet| reg_oracle(s, weights.lambda_mu, weights.lambda_sigma);
        let scale = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
        for (l, layer) in set.layers.iter().enumerate() {
            for i in 0..layer.values.len() {
                let mut plus = set.clone();
                plus.layers[l].values[i] += h;
                let mut minus = set.clone();
                minus.layers[l].values[i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                // Relative to the instance's largest gradient so near-zero entries do not divide by ~0.
                worst = worst.max((fd - analytic[l][i]).abs() / scale);
            }
        }
    }
    check(worst < 1e-5, format!("25 instances, every value, worst relative error {worst:.2e}"))
}

fn attention_normalization() -> Outcome {
    let run = || -> Result<(usize, f64, f64)> {
        let backend = ToyBackend::new(ToyConfig::default(), 5)?;
        let prompts = ["a photo of a toy", "a dog in the jungle", "a red cat", "vase"];
        let mut rng = seeded(13);
        let (mut passes, mut worst, mut min) = (0, 0.0f64, f64::INFINITY);
        for prompt in prompts {
            let ids = backend.tokenize(prompt);
            let cond = backend.encode_text(&ids)?;
            let session = begin_capture_with(backend.tap(), &ids, Vec::new(), Vec::new(), true)?;
            for _ in 0..15 {
                let z = toy::gaussian(&backend.latent_shape(), &mut rng);
                let t = rng.random_range(0..backend.schedule().steps());
                backend.predict_noise(&z, t, &cond)?;
            }
            session.end();
            for set in session.per_pass_maps() {
                passes += 1;
                for layer in &set.layers {
                    worst = worst.max(layer.max_normalization_error());
                    min = layer.values.iter().fold(min, |m, v| m.min(*v));
                }
            }
        }
        Ok((passes, worst, min))
    };
    let (passes, worst, min) = run().map_err(|e| e.to_string())?;
    check(
        passes >= 50 && worst <= 1e-5 && min >= 0.0,
        format!("{passes} passes, max |sum - 1| {worst:.1e}, min value {min:.2e}"),
    )
}

fn freezing_contracts(run: &TrainedArtifacts) -> Outcome {
    let placeholder = run.handle.token_id;
    let unchanged = |i: usize, group: &str| run.stages[i].fingerprints_before[group] == run.stages[i].fingerprints_after[group];
    let s1 = run.stages[0].changed_embedding_rows == [placeholder]
        && [groups::TEXT_ENCODER, groups::CROSS_ATTENTION, groups::UNET_REST].iter().all(|g| unchanged(0, g));
    let s2 = run.stages[1].changed_groups == [groups::CROSS_ATTENTION]
        && [groups::TOKEN_EMBEDDINGS, groups::TEXT_ENCODER, groups::UNET_REST].iter().all(|g| unchanged(1, g));
    let s3 = unchanged(2, groups::TEXT_ENCODER) && unchanged(2, groups::TOKEN_EMBEDDINGS);
    check(s1 && s2 && s3, format!("stage1 {s1}, stage2 {s2}, stage3 {s3} (seed 0)"))
}

fn mean_diffusion(records: &[attndb::trainer::LossRecord]) -> f64 {
    records.iter().map(|r| r.diffusion_loss).sum::<f64>() / records.len() as f64
}

struct SeedRun {
    seed: u64,
    secs: f64,
    loss_first: f64,
    loss_last: f64,
    gap_start: f64,
    gap_end: f64,
}

impl SeedRun {
    fn from(seed: u64, secs: f64, run: &TrainedArtifacts) -> Self {
        let s3 = &run.stages[2].losses;
        SeedRun {
            seed,
            secs,
            loss_first: mean_diffusion(&run.stages[0].losses[..20]),
            loss_last: mean_diffusion(&s3[s3.len() - 20..]),
            gap_start: run.stages[1].probe_before.mean_gap(),
            gap_end: run.stages[2].probe_after.mean_gap(),
        }
    }
}

fn learning_signal(runs: &[SeedRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut gap_ok = 0;
    let mut ok = true;
    for r in runs {
        let gap = r.gap_end <= r.gap_start;
        gap_ok += usize::from(gap);
        ok &= r.loss_last < r.loss_first && r.secs < 600.0;
        lines.push(format!(
            "seed {}: {:.0}s loss {:.4}->{:.4} gap {:.6}->{:.6}{}",
            r.seed,
            r.secs,
            r.loss_first,
            r.loss_last,
            r.gap_start,
            r.gap_end,
            if gap { "" } else { " (gap grew)" }
        ));
    }
    ok &= gap_ok >= 4;
    check(ok, format!("gap shrank on {gap_ok}/{} seeds\n      {}", runs.len(), lines.join("\n      ")))
}

/// Unit vector from the first eight pixel values; cheap to reproduce by hand.
struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn id(&self) -> String {
        "pixel8".into()
    }
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        let v = image.data()[..8].to_vec();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.iter().map(|x| x / n).collect())
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let v: Vec<f64> = (0..8).map(|i| (text.len() + i) as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.iter().map(|x| x / n).collect())
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = seeded(14);
    let mut image = || Tensor::new(vec![3, 2, 2], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let generated: Vec<Tensor> = (0..3).map(|_| image()).collect();
    let reference: Vec<Tensor> = (0..4).map(|_| image()).collect();
    let e = PixelEmbedder;
    let run = || -> Result<(f64, f64, f64, f64)> {
        Ok((
            identity_score(&generated, &reference, &e)?,
            text_alignment_score(&generated, "a toy", &e)?,
            identity_score(&reference[..1], &reference[..1], &e)?,
            identity_score(&[reference[2].clone(), reference[2].clone()], &[reference[2].clone()], &e)?,
        ))
    };
    let (id, text, self_one, self_rep) = run().map_err(|err| err.to_string())?;

    let first8 = |t: &Tensor| t.data()[..8].to_vec();
    let mut pair_sum = 0.0;
    for g in &generated {
        for r in &reference {
            pair_sum += cosine(&first8(g), &first8(r));
        }
    }
    let id_want = pair_sum / 12.0;
    let text_vec: Vec<f64> = (0..8).map(|i| (5 + i) as f64).collect();
    let text_want = generated.iter().map(|g| cosine(&first8(g), &text_vec)).sum::<f64>() / 3.0;
    let errs = [(id - id_want).abs(), (text - text_want).abs(), (self_one - 1.0).abs(), (self_rep - 1.0).abs()];
    let worst = errs.iter().fold(0.0f64, |m, e| m.max(*e));
    check(worst < 1e-6, format!("identity {id:.6}, text {text:.6}, self {self_one:.6}; worst error {worst:.1e}"))
}

const REFERENCE_PROMPTS: [&str; 24] = [
    "a photo of a [V] [category]",
    "a photo of a [V] [category] in Times Square",
    "a photo of two [V] [category] on a table",
    "a [V] [category] in the jungle",
    "a [V] [category] on a stone wall in the countryside",
    "a [V] [category] on a brick pathway in a garden",
    "a [V] [category] on a pile of fallen leaves in a forest",
    "a [V] [category] at a picnic spot with a checkered blanket",
    "a [V] [category] nestled among rocks",
    "a [V] [category] inside a basket",
    "a [V] [category] inside a metal cage",
    "a [V] [category] drenched in the rainy streets",
    "a [V] [category] in a grassy park with a sunglasses",
    "a [V] [category] floats on the water",
    "a [V] [category] covered by snow",
    "a red [V] [category] wearing bowtie",
    "a purple [V] [category]",
    "a black [V] [category]",
    "a [V] [category] latte art",
    "pencil drawing of a [V] [category]",
    "manga drawing of a [V] [category]",
    "a watercolor painting of a [V] [category]",
    "vector art of a [V] [category]",
    "a painting of a [V] [category] in the style of Monet",
];

fn prompt_suite() -> Outcome {
    let suite = load_prompt_suite();
    check(suite.templates == REFERENCE_PROMPTS, format!("{} templates", suite.len()))
}

fn noising_checks() -> Outcome {
    let run = || -> Result<(f64, f64, f64)> {
        let schedule = NoiseSchedule::linear(1e-4, 0.02, 100)?;
        let mut rng = seeded(15);
        let mut worst: f64 = 0.0;
        for t in [0, 1, 17, 50, 99] {
            // Closed form from the betas directly.
            let alpha_bar: f64 = (0..=t).map(|s| 1.0 - (1e-4 + (0.02 - 1e-4) * s as f64 / 99.0)).product();
            let z0 = toy::gaussian(&[4, 3, 3], &mut rng);
            let eps = toy::gaussian(&[4, 3, 3], &mut rng);
            let zt = add_noise(&z0, t, &eps, &schedule)?;
            for ((z, e), got) in z0.data().iter().zip(eps.data()).zip(zt.data()) {
                worst = worst.max((alpha_bar.sqrt() * z + (1.0 - alpha_bar).sqrt() * e - got).abs());
            }
        }
        let a = toy::gaussian(&[2, 5], &mut rng);
        let shifted = a.map(|x| x + 1.0);
        let zero = diffusion_loss(NoisePair { predicted: &a, target: &a })?;
        let one = diffusion_loss(NoisePair { predicted: &shifted, target: &a })?;
        Ok((worst, zero, one))
    };
    let (worst, zero, one) = run().map_err(|e| e.to_string())?;
    check(worst < 1e-10 && zero == 0.0 && one == 1.0, format!("add_noise error {worst:.1e}, mse {zero} and {one}"))
}

fn determinism(first: &TrainedArtifacts, again: &TrainedArtifacts) -> Outcome {
    let same_fp = first.final_fingerprints == again.final_fingerprints;
    let bits = |r: &TrainedArtifacts| -> Vec<(u64, u64)> {
        r.stages.iter().flat_map(|s| &s.losses).map(|l| (l.diffusion_loss.to_bits(), l.reg_loss.to_bits())).collect()
    };
    let same_losses = bits(first) == bits(again);
    check(same_fp && same_losses, format!("fingerprints equal {same_fp}, loss logs equal {same_losses} (seed 0)"))
}

/// Pretrains a fresh backend and runs the schedule; also returns the untouched pretrained base.
fn train(seed: u64, spec: &ConceptSpec, images: &ImageSet, schedule: &[StagePlan]) -> (f64, TrainedArtifacts, ToyBackend) {
    let start = Instant::now();
    let base = toy_backend(ToyConfig::default(), seed).expect("toy backend");
    let mut backend = base.clone();
    let run = run_full(&mut backend, spec, images, schedule, &TrainOptions::default(), seed, None).expect("training run");
    (start.elapsed().as_secs_f64(), run, base)
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("schedule fidelity", schedule_fidelity()),
        ("regularizer oracle equivalence", reg_oracle_equivalence()),
        ("regularizer gradient check", reg_gradient_check()),
        ("attention normalization", attention_normalization()),
        ("metric oracle", metric_oracle()),
        ("prompt suite", prompt_suite()),
        ("noising and diffusion loss", noising_checks()),
    ];

    let dir = tempfile::tempdir().expect("tempdir");
    write_synthetic_concept(dir.path(), 4, 32, 1).expect("synthetic images");
    let images = load_concept_images(dir.path()).expect("images");
    let spec = ConceptSpec::new("synthetic-toy", dir.path(), "toy");
    let schedule = default_schedule();

    // The same schedule with the regularizer off, from the same pretrained bases. Informational only.
    let unregularized: Vec<StagePlan> =
        schedule.iter().map(|p| StagePlan { reg_weights: RegWeights::ZERO, ..*p }).collect();
    let mut runs = Vec::new();
    let mut ablation_gaps = Vec::new();
    let mut seed0 = None;
    for seed in 0..5 {
        let (secs, run, base) = train(seed, &spec, &images, &schedule);
        runs.push(SeedRun::from(seed, secs, &run));
        let mut plain = base.clone();
        let ablated = run_full(&mut plain, &spec, &images, &unregularized, &TrainOptions::default(), seed, None)
            .expect("ablation run");
        ablation_gaps.push(SeedRun::from(seed, 0.0, &ablated));
        if seed == 0 {
            seed0 = Some(run);
        }
    }
    let seed0 = seed0.expect("seed 0 ran");
    results.push(("freezing contracts", freezing_contracts(&seed0)));
    results.push(("end-to-end learning signal", learning_signal(&runs)));
    let (_, rerun, _) = train(0, &spec, &images, &schedule);
    results.push(("determinism", determinism(&seed0, &rerun)));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    let shrank = ablation_gaps.iter().filter(|r| r.gap_end <= r.gap_start).count();
    let smaller = runs.iter().zip(&ablation_gaps).filter(|(r, a)| r.gap_end < a.gap_end).count();
    println!(
        "INFO  regularizer ablation: without it the gap shrank on {shrank}/5 seeds; \
         with it the final gap was smaller on {smaller}/5 seeds"
    );
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
