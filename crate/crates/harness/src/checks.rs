//! Built-in verification suites behind the `gradcheck` and `selfcheck`
//! commands. Every check returns a named pass/fail with a measured value.

use std::fs;
use std::path::Path;

use m2curl_core::repr::{
    augment_pair, combined_loss, combined_loss_with_key_heads, embed_views, info_nce, momentum_update, AugmentedPair,
    ContrastiveConfig, Encoder, Head, RepresentationModel,
};
use m2curl_core::rl::{bellman_targets, clipped_surrogate, gae};
use m2curl_core::CoreError;
use m2curl_numerics::{grad_check, Binding, Conv2d, Linear, Mlp, Module, NumericsError, Parameter, Tape, Tensor};
use m2curl_sim::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_config_str;
use crate::metrics::METRICS_FILE;
use crate::run::run_experiment;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn measured(name: &str, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            passed: value < bound,
            detail: format!("{value:.3e} < {bound:.0e}"),
        }
    }

    fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Check::flag(name, false, format!("error: {err}"))
    }
}

fn numerics<T>(r: m2curl_core::Result<T>) -> m2curl_numerics::Result<T> {
    r.map_err(|e| match e {
        CoreError::Numerics(n) => n,
        other => NumericsError::Contract(other.to_string()),
    })
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Projects `out` on a fixed random direction so every output entry matters.
fn probe(tape: &mut Tape, out: m2curl_numerics::Var, w: &Tensor) -> m2curl_numerics::Result<m2curl_numerics::Var> {
    let wv = tape.constant(w.clone())?;
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

fn gradcheck_case<M: Module>(
    name: &str,
    module: &mut M,
    forward: impl Fn(&mut Tape, &M) -> m2curl_numerics::Result<m2curl_numerics::Var>,
    tol: f64,
) -> Check {
    match grad_check(module, forward, tol) {
        Ok(r) => Check::measured(name, r.max_rel_error, tol),
        Err(e) => Check::failed(name, e),
    }
}

/// Visits the trainable half of a representation model.
struct Trainable(RepresentationModel);

impl Module for Trainable {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.0.online.visit(f);
        self.0.heads.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.0.online.visit_mut(f);
        self.0.heads.visit_mut(f);
    }
}

fn small_contrastive() -> ContrastiveConfig {
    ContrastiveConfig {
        embed_dim: 4,
        head_hidden: 6,
        crop_size: 9,
        ..ContrastiveConfig::sac_default()
    }
}

fn random_pairs(n: usize, side: usize, rng: &mut impl Rng) -> Vec<(Image, Image)> {
    let mut img = || Image {
        height: side,
        width: side,
        pixels: (0..side * side).map(|_| rng.gen()).collect(),
    };
    (0..n).map(|_| (img(), img())).collect()
}

fn contrastive_setup(seed: u64, b: usize) -> (RepresentationModel, AugmentedPair, ContrastiveConfig) {
    let cfg = small_contrastive();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RepresentationModel::new(&cfg, &mut rng).expect("valid config");
    model
        .momentum
        .visit_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05)));
    let pairs = random_pairs(b, 12, &mut rng);
    let aug = augment_pair(&pairs, cfg.crop_size, &mut rng).expect("crop fits");
    (model, aug, cfg)
}

/// Central-difference checks (h = 1e-5, f64): single layers to 1e-4,
/// composite networks and the full contrastive pipeline to 1e-3.
pub fn gradcheck_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6C);
    let mut out = Vec::new();

    let mut lin = Linear::new("affine", 5, 4, &mut rng);
    let (x, w) = (random_tensor(&[3, 5], &mut rng), random_tensor(&[3, 4], &mut rng));
    out.push(gradcheck_case("affine", &mut lin, |t, l| {
        let xv = t.constant(x.clone())?;
        let y = l.forward(t, xv, Binding::Trainable)?;
        probe(t, y, &w)
    }, 1e-4));

    let mut conv = Conv2d::new("conv", 2, 3, 3, 2, &mut rng);
    let (x, w) = (random_tensor(&[2, 2, 7, 7], &mut rng), random_tensor(&[2, 3, 3, 3], &mut rng));
    out.push(gradcheck_case("conv2d", &mut conv, |t, c| {
        let xv = t.constant(x.clone())?;
        let y = c.forward(t, xv, Binding::Trainable)?;
        probe(t, y, &w)
    }, 1e-4));

    // ReLU between two affine maps; random inputs keep clear of the kink.
    let mut mlp = Mlp::new("relu_mlp", &[4, 6, 3], &mut rng);
    let (x, w) = (random_tensor(&[5, 4], &mut rng), random_tensor(&[5, 3], &mut rng));
    out.push(gradcheck_case("relu", &mut mlp, |t, m| {
        let xv = t.constant(x.clone())?;
        let y = m.forward(t, xv, Binding::Trainable)?;
        probe(t, y, &w)
    }, 1e-4));

    let mut head = Head::new("head", 4, 6, &mut rng);
    let (z, w) = (random_tensor(&[3, 4], &mut rng), random_tensor(&[3, 4], &mut rng));
    out.push(gradcheck_case("heads", &mut head, |t, h| {
        let zv = t.constant(z.clone())?;
        let c = numerics(h.apply(t, zv, Binding::Trainable))?;
        probe(t, c, &w)
    }, 1e-4));

    match Encoder::new("encoder", 9, 3, &mut rng) {
        Ok(mut enc) => {
            let imgs = Tensor::new(&[2, 1, 9, 9], (0..162).map(|_| rng.gen_range(0.0..1.0)).collect())
                .expect("shape matches data");
            let w = random_tensor(&[2, 3], &mut rng);
            out.push(gradcheck_case("encoders", &mut enc, |t, e| {
                let xv = t.constant(imgs.clone())?;
                let z = numerics(e.forward(t, xv, Binding::Trainable))?;
                probe(t, z, &w)
            }, 1e-3));
        }
        Err(e) => out.push(Check::failed("encoders", e)),
    }

    let (model, aug, cfg) = contrastive_setup(6, 3);
    let key_heads = model.heads.clone();
    let mut trainable = Trainable(model);
    out.push(gradcheck_case("pipeline augment->encode->head->L_MM", &mut trainable, |t, m| {
        let e = numerics(embed_views(t, &m.0, &aug))?;
        Ok(numerics(combined_loss_with_key_heads(t, &m.0.heads, &key_heads, &e, &cfg))?.0)
    }, 1e-3));
    out
}

fn unit_rows(rows: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Direct summation over the in-batch softmax.
pub fn brute_force_info_nce(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b = q.len();
    let mut total = 0.0;
    for i in 0..b {
        let num = (dot(&q[i], &k[i]) / tau).exp();
        let den: f64 = (0..b).map(|j| (dot(&q[i], &k[j]) / tau).exp()).sum();
        total -= (num / den).ln();
    }
    total / b as f64
}

fn tape_info_nce(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> m2curl_core::Result<f64> {
    let mut tape = Tape::new();
    let qv = tape.constant(Tensor::from_rows(q)?)?;
    let kv = tape.constant(Tensor::from_rows(k)?)?;
    let l = info_nce(&mut tape, qv, kv, tau)?;
    Ok(tape.item(l)?)
}

/// Worst deviation from the brute-force oracle over 100 random batches, and
/// the deviation from `ln B` on identical rows.
pub fn info_nce_oracle() -> m2curl_core::Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1CE);
    let (mut worst, mut worst_ln) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let b = [2, 4, 8, 16][case % 4];
        let d = [2, 8, 50][case / 4 % 3];
        let tau = rng.gen_range(0.05..1.0);
        let (q, k) = (unit_rows(b, d, &mut rng), unit_rows(b, d, &mut rng));
        worst = worst.max((tape_info_nce(&q, &k, tau)? - brute_force_info_nce(&q, &k, tau)).abs());
    }
    for b in [2usize, 4, 8, 16] {
        let row = unit_rows(1, 8, &mut rng).remove(0);
        let same = vec![row; b];
        worst_ln = worst_ln.max((tape_info_nce(&same, &same, 0.1)? - (b as f64).ln()).abs());
    }
    Ok((worst, worst_ln))
}

fn all_zero(m: &impl Module) -> bool {
    let mut z = true;
    m.visit(&mut |p| z &= p.grad().data().iter().all(|&g| g.to_bits() == 0));
    z
}

/// Sum-identity gap at λ = 1, whether each ablation zeroes the right heads'
/// gradients bitwise, and whether momentum gradients stay zero.
pub struct LambdaAlgebra {
    pub sum_gap: f64,
    pub intra_zeroes_inter_heads: bool,
    pub inter_zeroes_intra_heads: bool,
    pub momentum_grads_zero: bool,
}

pub fn lambda_algebra() -> m2curl_core::Result<LambdaAlgebra> {
    let (mut model, aug, cfg) = contrastive_setup(8, 4);
    let grads = |c: &ContrastiveConfig, model: &mut RepresentationModel| -> m2curl_core::Result<f64> {
        model.zero_grads();
        let mut tape = Tape::new();
        let (loss, comps) = combined_loss(&mut tape, model, &aug, c)?;
        tape.grad_eval(loss, &mut [model])?;
        Ok((comps.mm - (comps.vv + comps.tt + comps.vt + comps.tv)).abs())
    };
    let sum_gap = grads(&cfg, &mut model)?;
    let momentum_grads_zero = all_zero(&model.momentum);
    grads(&ContrastiveConfig { lambda_vt: 0.0, lambda_tv: 0.0, ..cfg }, &mut model)?;
    let intra = all_zero(&model.heads.vt) && all_zero(&model.heads.tv) && !all_zero(&model.heads.vv);
    grads(&ContrastiveConfig { lambda_vv: 0.0, lambda_tt: 0.0, ..cfg }, &mut model)?;
    let inter = all_zero(&model.heads.vv) && all_zero(&model.heads.tt) && !all_zero(&model.heads.vt);
    Ok(LambdaAlgebra {
        sum_gap,
        intra_zeroes_inter_heads: intra,
        inter_zeroes_intra_heads: inter,
        momentum_grads_zero,
    })
}

fn params(m: &impl Module) -> Vec<u64> {
    let mut v = Vec::new();
    m.visit(&mut |p| v.extend(p.value.data().iter().map(|x| x.to_bits())));
    v
}

/// `(α = 0 copies online exactly, α = 1 leaves momentum untouched)`.
pub fn momentum_contract() -> m2curl_core::Result<(bool, bool)> {
    let (mut model, _, _) = contrastive_setup(10, 2);
    let before = params(&model.momentum);
    momentum_update(&mut model, 1.0)?;
    let noop = params(&model.momentum) == before;
    momentum_update(&mut model, 0.0)?;
    let copy = params(&model.momentum) == params(&model.online);
    Ok((copy, noop))
}

/// Largest deviations for the three RL identities: ratio-one surrogate
/// equals −mean Â, γ = 0 Bellman target equals r, GAE(λ = 0) equals the
/// one-step TD error.
pub fn rl_identities() -> m2curl_core::Result<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x41);
    let n = 16;
    let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let logp: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..0.0)).collect();
    let mut tape = Tape::new();
    let lp = tape.constant(Tensor::from_vec(logp.clone()))?;
    let (s, _) = clipped_surrogate(&mut tape, lp, &logp, &adv, 0.2)?;
    let surrogate_gap = (tape.item(s)? + adv.iter().sum::<f64>() / n as f64).abs();

    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect();
    let dones: Vec<bool> = (0..n).map(|i| i % 5 == 4).collect();
    let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..0.0)).collect();
    let lpn: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..1.0)).collect();
    let y = bellman_targets(&r, &dones, &q, &q, &lpn, 0.0, 0.1);
    let bellman_gap = y.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..0.0)).collect();
    let boot = -2.5;
    let (a, _) = gae(&r, &v, &dones, boot, 0.99, 0.0)?;
    let mut gae_gap = 0.0f64;
    for t in 0..n {
        let next = if dones[t] { 0.0 } else if t + 1 < n { v[t + 1] } else { boot };
        gae_gap = gae_gap.max((a[t] - (r[t] + 0.99 * next - v[t])).abs());
    }
    Ok([surrogate_gap, bellman_gap, gae_gap])
}

/// Runs a short training job twice under `scratch` and compares the metrics
/// bytes.
pub fn determinism(scratch: &Path) -> crate::Result<bool> {
    let run = |sub: &str| -> crate::Result<Vec<u8>> {
        let dir = scratch.join(sub);
        let cfg = parse_config_str(
            &serde_json::json!({
                "env": "push_world",
                "algorithm": "sac",
                "seed": 11,
                "total_env_steps": 60,
                "eval_every": 30,
                "eval_episodes": 1,
                "contrastive": {"crop_size": 12, "embed_dim": 8, "head_hidden": 16},
                "sac": {"batch_size": 8, "warmup_steps": 20, "hidden_sizes": [16]},
                "env_config": {"push_world": {"image_size": 16, "horizon": 25}},
                "output_dir": dir,
            })
            .to_string(),
        )?;
        run_experiment(&cfg)?;
        fs::read(dir.join(METRICS_FILE)).map_err(crate::error::io_err(dir.join(METRICS_FILE)))
    };
    Ok(run("a")? == run("b")?)
}

/// Loss-oracle, algebra, RL-identity and determinism checks.
pub fn selfcheck_suite(scratch: &Path) -> Vec<Check> {
    let mut out = Vec::new();
    match info_nce_oracle() {
        Ok((brute, ln_b)) => {
            out.push(Check::measured("info_nce vs brute force (100 batches)", brute, 1e-6));
            out.push(Check::measured("info_nce identical rows = ln B", ln_b, 1e-9));
        }
        Err(e) => out.push(Check::failed("info_nce oracle", e)),
    }
    match lambda_algebra() {
        Ok(a) => {
            out.push(Check::measured("L_MM sum identity", a.sum_gap, 1e-9));
            out.push(Check::flag("intra-only zeroes H_vt/H_tv grads", a.intra_zeroes_inter_heads, "bitwise"));
            out.push(Check::flag("inter-only zeroes H_vv/H_tt grads", a.inter_zeroes_intra_heads, "bitwise"));
            out.push(Check::flag("momentum encoders receive no gradient", a.momentum_grads_zero, "bitwise"));
        }
        Err(e) => out.push(Check::failed("lambda algebra", e)),
    }
    match momentum_contract() {
        Ok((copy, noop)) => {
            out.push(Check::flag("momentum alpha=0 copies online", copy, "bitwise"));
            out.push(Check::flag("momentum alpha=1 is a no-op", noop, "bitwise"));
        }
        Err(e) => out.push(Check::failed("momentum contract", e)),
    }
    match rl_identities() {
        Ok([s, b, g]) => {
            out.push(Check::measured("ratio-one surrogate = -mean(A)", s, 1e-9));
            out.push(Check::measured("gamma=0 Bellman target = r", b, 1e-9));
            out.push(Check::measured("GAE lambda=0 = one-step TD", g, 1e-9));
        }
        Err(e) => out.push(Check::failed("rl identities", e)),
    }
    match determinism(scratch) {
        Ok(same) => out.push(Check::flag("repeated run gives identical metrics", same, "byte comparison")),
        Err(e) => out.push(Check::failed("determinism", e)),
    }
    out
}
