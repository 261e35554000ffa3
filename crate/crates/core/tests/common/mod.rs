//! Independent oracles shared by the integration tests. Everything here is
//! written as plain f64 loops and shares no arithmetic with the library.
#![allow(dead_code)]

use latentguard::diffusion::{
    batch_loss_and_grads, time_embedding, Batch, Denoiser, DenoiserConfig, NoiseSchedule,
    ScheduleParams,
};
use latentguard::numerics::{gaussian, RngState, Tensor};
use latentguard::steering::{
    objective, objective_grad, AnchorSets, Regularizer, Similarity, SteeringConfig,
};

pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// f64 forward pass of the MLP from raw parameter buffers.
pub fn oracle_forward(cfg: &DenoiserConfig, params: &[Vec<f64>], x: &[f64], t: usize, cond: usize) -> Vec<f64> {
    let mut temb = vec![0.0f32; cfg.time_dim];
    time_embedding(t, cfg.time_dim, &mut temb);
    let mut h: Vec<f64> = x.to_vec();
    h.extend(temb.iter().map(|&v| f64::from(v)));
    h.extend_from_slice(&params[0][cond * cfg.cond_dim..(cond + 1) * cfg.cond_dim]);
    for l in 0..cfg.layers {
        let w = &params[1 + 2 * l];
        let b = &params[2 + 2 * l];
        let out_dim = b.len();
        let in_dim = h.len();
        let mut z = vec![0.0f64; out_dim];
        for j in 0..out_dim {
            let mut acc = b[j];
            for i in 0..in_dim {
                acc += h[i] * w[i * out_dim + j];
            }
            z[j] = acc;
        }
        h = if l + 1 == cfg.layers { z } else { z.into_iter().map(silu).collect() };
    }
    if cfg.skip {
        for (o, &xv) in h.iter_mut().zip(x) {
            *o += xv;
        }
    }
    h
}

pub fn oracle_loss(cfg: &DenoiserConfig, params: &[Vec<f64>], batch: &Batch, sched: &NoiseSchedule) -> f64 {
    let d = cfg.image_len;
    let mut total = 0.0;
    for (b, (&t, &cond)) in batch.ts.iter().zip(&batch.conds).enumerate() {
        let a = f64::from(sched.alpha_bar(t));
        let xt: Vec<f64> = (0..d)
            .map(|i| a.sqrt() * f64::from(batch.x0[b * d + i]) + (1.0 - a).sqrt() * f64::from(batch.eps[b * d + i]))
            .collect();
        let pred = oracle_forward(cfg, params, &xt, t, cond);
        for i in 0..d {
            let r = pred[i] - f64::from(batch.eps[b * d + i]);
            total += r * r;
        }
    }
    total / (batch.len() * d) as f64
}

pub fn check_denoiser(cfg: DenoiserConfig, seed: u64) -> f64 {
    let sched = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
    let mut rng = RngState::new(seed);
    let model = Denoiser::new(cfg.clone(), &mut rng).unwrap();
    let n = 3;
    let batch = Batch {
        x0: (0..n * cfg.image_len).map(|_| rng.uniform() as f32 * 2.0 - 1.0).collect(),
        eps: (0..n * cfg.image_len).map(|_| rng.standard_normal() as f32).collect(),
        ts: vec![3, 47, 99],
        conds: vec![0, 2, cfg.cond_count],
    };
    let (loss, grads) = batch_loss_and_grads(&batch, &model, &sched).unwrap();
    let mut params: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, p)| p.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let base = oracle_loss(&cfg, &params, &batch, &sched);
    assert!((base - f64::from(loss)).abs() < 1e-5 * base.max(1.0), "forward mismatch {base} vs {loss}");

    let h = 1e-5;
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p][i];
            params[p][i] = orig + h;
            let up = oracle_loss(&cfg, &params, &batch, &sched);
            params[p][i] = orig - h;
            let down = oracle_loss(&cfg, &params, &batch, &sched);
            params[p][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = f64::from(grads[p][i]);
            let rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
            // Gradients this small sit at the f32 rounding floor of the
            // analytic path; they are checked in absolute terms instead.
            let err = if fd.abs() < 1e-5 { (analytic - fd).abs() * 1e2 } else { rel };
            worst = worst.max(err);
        }
    }
    worst
}

/// Independent f64 evaluation of the steering objective.
pub fn steering_oracle(l: &[f64], l0: &[f64], anchors: &AnchorSets, cfg: &SteeringConfig) -> f64 {
    let nl = l.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sim = |a: &Tensor| -> f64 {
        let a: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
        let d: f64 = a.iter().zip(l).map(|(x, y)| x * y).sum();
        match cfg.similarity {
            Similarity::Dot => d,
            Similarity::Cosine => d / (nl * a.iter().map(|v| v * v).sum::<f64>().sqrt()),
        }
    };
    let mean = |set: &[Tensor]| -> f64 {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(&sim).sum::<f64>() / set.len() as f64
        }
    };
    let reg: f64 = l
        .iter()
        .zip(l0)
        .map(|(x, y)| match cfg.reg {
            Regularizer::L2 => (x - y) * (x - y),
            Regularizer::L1 => (x - y).abs(),
        })
        .sum();
    -f64::from(cfg.alpha) * mean(&anchors.desired) + f64::from(cfg.beta) * mean(&anchors.undesired)
        + f64::from(cfg.reg_weight) * reg
}

/// Checks `objective` and `objective_grad` on `cases` random configurations.
/// Returns the number of configurations and the worst relative gradient error.
pub fn check_steering(cases: usize, seed: u64) -> (usize, f64) {
    let mut worst = 0.0f64;
    let mut rng = RngState::new(seed);
    let dim = 12;
    let mut checked = 0;
    for case in 0..cases {
        let similarity = if case % 2 == 0 { Similarity::Cosine } else { Similarity::Dot };
        let reg = if (case / 2) % 2 == 0 { Regularizer::L2 } else { Regularizer::L1 };
        let cfg = SteeringConfig {
            alpha: rng.uniform() as f32 * 2.0,
            beta: rng.uniform() as f32 * 2.0,
            similarity,
            reg,
            reg_weight: rng.uniform() as f32,
            ..SteeringConfig::default()
        };
        let nd = case % 3;
        let nu = 1 + case % 4;
        let anchors = AnchorSets::new(
            (0..nd).map(|_| gaussian(&mut rng, &[dim]).unwrap()).collect(),
            (0..nu).map(|_| gaussian(&mut rng, &[dim]).unwrap()).collect(),
        );
        let l0 = gaussian(&mut rng, &[dim]).unwrap();
        // Keep every coordinate of L − L0 well away from the l1 kink.
        let offset: Vec<f32> = (0..dim)
            .map(|_| {
                let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                s * (0.2 + rng.uniform() as f32)
            })
            .collect();
        let l = l0.add(&Tensor::from_slice(&offset).unwrap()).unwrap();

        let value = objective(&l, &l0, &anchors, &cfg).unwrap();
        let lf: Vec<f64> = l.data().iter().map(|&v| f64::from(v)).collect();
        let l0f: Vec<f64> = l0.data().iter().map(|&v| f64::from(v)).collect();
        let oracle_value = steering_oracle(&lf, &l0f, &anchors, &cfg);
        assert!((f64::from(value) - oracle_value).abs() < 1e-5 * oracle_value.abs().max(1.0));

        let g = objective_grad(&l, &l0, &anchors, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..dim {
            let mut up = lf.clone();
            up[i] += h;
            let mut down = lf.clone();
            down[i] -= h;
            let fd = (steering_oracle(&up, &l0f, &anchors, &cfg) - steering_oracle(&down, &l0f, &anchors, &cfg))
                / (2.0 * h);
            let rel = (f64::from(g.data()[i]) - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
        checked += 1;
    }
    (checked, worst)
}

/// Brute-force tiled distance: enumerate every window position directly.
pub fn naive_tiled_l2(a: &Tensor, b: &Tensor, tile: usize, stride: usize) -> f32 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let positions = |extent: usize| {
        let mut p: Vec<usize> = Vec::new();
        let mut k = 0;
        loop {
            let start = (k * stride).min(extent - tile);
            if p.last() != Some(&start) {
                p.push(start);
            }
            if start + tile >= extent {
                break;
            }
            k += 1;
        }
        p
    };
    let mut best = 0.0f32;
    for y in positions(h) {
        for x in positions(w) {
            let mut ss = 0.0f64;
            for r in 0..tile {
                for c in 0..tile {
                    let i = (y + r) * w + x + c;
                    let d = f64::from(a.data()[i]) - f64::from(b.data()[i]);
                    ss += d * d;
                }
            }
            let v = (ss / (tile * tile) as f64).sqrt() as f32;
            if v > best {
                best = v;
            }
        }
    }
    best
}
