//! End-to-end acceptance suite. Trains the toy model twice through the CLI
//! (once single-threaded, once with four workers), then checks each
//! criterion and prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use latentguard::corpus::Corpus;
use latentguard::diffusion::{noise_with, DenoiserConfig};
use latentguard::filters::{tiled_l2, ContentFilter, MemorizationFilter, MemorizationParams};
use latentguard::numerics::{gaussian, l2_normed, RngState, Tensor};
use latentguard::pipeline::{read_audit, GenerationRecord, GenerationStatus};
use latentguard::steering::{refine_latent, AnchorSets, Regularizer, Similarity, SteeringConfig};
use serde_json::Value;

const AMPLIFIED: usize = 0;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

struct Run {
    dir: tempfile::TempDir,
    timings: BTreeMap<&'static str, Duration>,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }
}

fn write_config(dir: &Path) -> PathBuf {
    let root = workspace_root();
    let text = fs::read_to_string(root.join("configs/toy.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    let corpus = root.join("crates/core/fixtures/corpus/manifest.json");
    cfg["corpus"] = Value::String(corpus.to_str().unwrap().to_string());
    cfg["output"] = Value::String("out".into());
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn cli(config: &Path, jobs: usize, args: &[&str]) -> Duration {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_latentguard"))
        .arg("--config")
        .arg(config)
        .args(["--jobs", &jobs.to_string()])
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "latentguard {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    start.elapsed()
}

fn full_run(jobs: usize) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let mut timings = BTreeMap::new();
    timings.insert("train", cli(&config, jobs, &["train"]));
    timings.insert("baseline", cli(&config, jobs, &["generate", "--baseline"]));
    timings.insert("guarded", cli(&config, jobs, &["generate", "--guarded"]));
    timings.insert("invert", cli(&config, jobs, &["invert"]));
    timings.insert("audit", cli(&config, jobs, &["audit"]));
    timings.insert("report", cli(&config, jobs, &["report"]));
    let out = dir.path().join("out");
    let latent = out.join("baseline/c0_s0.lstn");
    let ring = out.join("invert/ring.lstn");
    timings.insert(
        "steer",
        cli(
            &config,
            jobs,
            &["steer", "--latent", latent.to_str().unwrap(), "--undesired", ring.to_str().unwrap(), "--condition", "0"],
        ),
    );
    Run { dir, timings }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn load_filter() -> MemorizationFilter {
    let corpus = Corpus::load(&workspace_root().join("crates/core/fixtures/corpus/manifest.json")).unwrap();
    MemorizationFilter::new(MemorizationParams { tile: 8, stride: 4, threshold: 0.1 }, Arc::new(corpus)).unwrap()
}

fn read_lstn(p: &Path) -> Tensor {
    Tensor::from_lstn_bytes(&fs::read(p).unwrap()).unwrap()
}

fn audit_records(out: &Path) -> Vec<GenerationRecord> {
    read_audit(BufReader::new(fs::File::open(out.join("guarded/audit.jsonl")).unwrap())).unwrap()
}

fn final_score(r: &GenerationRecord) -> f32 {
    r.final_attempt().verdicts.iter().map(|v| v.score).fold(f32::INFINITY, f32::min)
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn memorization_reproduced(run: &Run) -> Verdict {
    let filter = load_filter();
    let scores: Vec<f32> = (0..10)
        .map(|s| {
            let img = read_lstn(&run.out().join(format!("baseline/c{AMPLIFIED}_s{s}.lstn")));
            filter.scan(&img).unwrap().score
        })
        .collect();
    let below = scores.iter().filter(|&&s| s < 0.1).count();
    let train = run.timings["train"];
    Verdict {
        pass: below >= 8 && train <= Duration::from_secs(600),
        detail: format!("{below}/10 seeds below 0.1, max score {:.4}, train {:.0}s", scores.iter().cloned().fold(0.0, f32::max), train.as_secs_f64()),
    }
}

fn mitigation(run: &Run) -> Verdict {
    let filter = load_filter();
    let records = audit_records(&run.out());
    let steered = records
        .iter()
        .filter(|r| r.request.condition == AMPLIFIED)
        .filter(|r| r.status == GenerationStatus::CleanSteered && final_score(r) > 0.1)
        .count();
    let accepted: Vec<&GenerationRecord> = records.iter().filter(|r| r.accepted()).collect();
    // rescan the written images rather than trusting the logged verdicts
    let above = accepted
        .iter()
        .filter(|r| {
            let p = run.out().join(format!("guarded/c{}_s{}.lstn", r.request.condition, r.request.seed));
            filter.scan(&read_lstn(&p)).unwrap().score > 0.1
        })
        .count();
    let fraction = above as f64 / accepted.len().max(1) as f64;
    let total: Duration = run.timings.values().sum();
    Verdict {
        pass: steered >= 8 && !accepted.is_empty() && fraction == 1.0 && total <= Duration::from_secs(900),
        detail: format!(
            "{steered}/10 clean_steered above 0.1, {above}/{} accepted above threshold, total {:.0}s",
            accepted.len(),
            total.as_secs_f64()
        ),
    }
}

fn relevance(run: &Run) -> Verdict {
    let summary: Value = serde_json::from_slice(&fs::read(run.out().join("audit/summary.json")).unwrap()).unwrap();
    let pairs = summary["drift"]["pairs"].as_u64().unwrap();
    let cos = summary["drift"]["mean_cosine"].as_f64().unwrap();
    let dist = summary["drift"]["mean_distance"].as_f64().unwrap();
    let cross = summary["mean_cross_condition_distance"].as_f64().unwrap();
    Verdict {
        pass: pairs > 0 && dist < cross && cos > 0.0,
        detail: format!("{pairs} pairs, drift distance {dist:.4} < cross-condition {cross:.4}, mean cosine {cos:.4}"),
    }
}

fn gradients() -> Verdict {
    let (checked, steer_worst) = common::check_steering(24, 77);
    let cfg = DenoiserConfig {
        image_len: 6,
        hidden: 5,
        layers: 2,
        time_dim: 4,
        cond_dim: 3,
        cond_count: 2,
        skip: true,
    };
    let den_worst = common::check_denoiser(cfg, 11);
    Verdict {
        pass: checked >= 20 && steer_worst < 1e-3 && den_worst < 1e-3,
        detail: format!("{checked} steering configs worst {steer_worst:.2e}, 2-layer denoiser worst {den_worst:.2e}"),
    }
}

fn identities(run: &Run) -> Verdict {
    let mut rng = RngState::new(5);
    let mut refine_ok = true;
    for sim in [Similarity::Cosine, Similarity::Dot] {
        for reg in [Regularizer::L2, Regularizer::L1] {
            let l0 = gaussian(&mut rng, &[16, 16]).unwrap();
            let anchors = AnchorSets::new(
                vec![gaussian(&mut rng, &[16, 16]).unwrap()],
                vec![gaussian(&mut rng, &[16, 16]).unwrap(), gaussian(&mut rng, &[16, 16]).unwrap()],
            );
            let cfg = SteeringConfig { alpha: 0.0, beta: 0.0, similarity: sim, reg, ..SteeringConfig::default() };
            let r = refine_latent(&l0, &anchors, &cfg).unwrap();
            refine_ok &= r.latent == l0 && r.displacement == 0.0;
        }
    }

    let records = audit_records(&run.out());
    let passthrough: Vec<&GenerationRecord> =
        records.iter().filter(|r| r.status == GenerationStatus::CleanUnmodified).collect();
    let identical = passthrough
        .iter()
        .filter(|r| {
            let name = format!("c{}_s{}.lstn", r.request.condition, r.request.seed);
            fs::read(run.out().join("baseline").join(&name)).unwrap()
                == fs::read(run.out().join("guarded").join(&name)).unwrap()
        })
        .count();

    let mut endpoints_ok = true;
    for _ in 0..20 {
        let x = gaussian(&mut rng, &[16, 16]).unwrap();
        let eps = gaussian(&mut rng, &[16, 16]).unwrap();
        endpoints_ok &= noise_with(&x, 1.0, &eps).unwrap() == x;
        endpoints_ok &= noise_with(&x, 0.0, &eps).unwrap() == eps;
    }
    Verdict {
        pass: refine_ok && !passthrough.is_empty() && identical == passthrough.len() && endpoints_ok,
        detail: format!(
            "zero-weight refine exact: {refine_ok}, pass-through identical {identical}/{}, noising endpoints exact: {endpoints_ok}",
            passthrough.len()
        ),
    }
}

fn random_image(rng: &mut RngState, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], (0..h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
}

fn metric_oracle() -> Verdict {
    let mut rng = RngState::new(6);
    let mut equal = 0;
    for i in 0..200 {
        let (h, w, tile, stride) = if i < 50 {
            (16, 16, 8, 4)
        } else {
            let h = 4 + rng.below(21);
            let w = 4 + rng.below(21);
            let tile = 1 + rng.below(h.min(w));
            (h, w, tile, 1 + rng.below(tile))
        };
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        if tiled_l2(&a, &b, tile, stride).unwrap() == common::naive_tiled_l2(&a, &b, tile, stride) {
            equal += 1;
        }
    }
    let mut degenerate = 0;
    for n in [1, 5, 16, 23] {
        let a = random_image(&mut rng, n, n);
        let b = random_image(&mut rng, n, n);
        if tiled_l2(&a, &b, n, 1).unwrap() == l2_normed(&a, &b).unwrap() {
            degenerate += 1;
        }
    }
    Verdict {
        pass: equal == 200 && degenerate == 4,
        detail: format!("{equal}/200 pairs equal to brute force, {degenerate}/4 whole-image tiles equal l2_normed"),
    }
}

fn inversion(run: &Run) -> Verdict {
    let csv = fs::read_to_string(run.out().join("invert/roundtrip.csv")).unwrap();
    let maes: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let worst = maes.iter().cloned().fold(0.0, f64::max);
    Verdict {
        pass: maes.len() == 8 && worst < 0.05,
        detail: format!("{} images, worst round-trip MAE {worst:.4}", maes.len()),
    }
}

fn determinism(a: &Run, b: &Run) -> Verdict {
    let fa = files_under(&a.out());
    let fb = files_under(&b.out());
    let same = fa
        .iter()
        .filter(|p| fb.contains(p) && fs::read(a.out().join(p)).unwrap() == fs::read(b.out().join(p)).unwrap())
        .count();
    Verdict {
        pass: fa == fb && same == fa.len(),
        detail: format!("{same}/{} output files byte-identical between --jobs 1 and --jobs 4", fa.len()),
    }
}

fn main() {
    let a = full_run(1);
    let b = full_run(4);
    let results = [
        ("1 memorization", memorization_reproduced(&a)),
        ("2 mitigation", mitigation(&a)),
        ("3 relevance", relevance(&a)),
        ("4 gradients", gradients()),
        ("5 identities", identities(&a)),
        ("6 metric oracle", metric_oracle()),
        ("7 inversion", inversion(&a)),
        ("8 determinism", determinism(&a, &b)),
    ];
    for (name, v) in &results {
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
