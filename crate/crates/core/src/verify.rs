//! Invariant suite behind `mrn verify`: finite-difference gradients, the CTC
//! path-enumeration oracle, fusion algebra and the protocol audits.

use std::time::Instant;

use mrn_autograd::{grad_check_many, AutogradError, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::glyphgen::GrayImage;
use crate::recognizer::{
    check_feasible, ctc_batch, ctc_loss_and_grad, BranchShape, BranchVars, FrameConfig, RecognizerBranch, SequenceProbs,
    UnionCharset, BLANK, PARAM_NAMES,
};
use crate::router::{fuse, fuse_var, quantize, stage2_loss_var, DomainScores, Router, RouterKind, VotingMode};
use crate::trainer::{run_schedule, ModelCache, RunReport};

pub const GRAD_TOL: f64 = 1e-4;
pub const CTC_TOL: f64 = 1e-8;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {} ({:.1}s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> Result<Check> {
    let started = Instant::now();
    let (passed, detail) = body()?;
    Ok(Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn ag(e: crate::MrnError) -> AutogradError {
    AutogradError::Invalid(e.to_string())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn random_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> SequenceProbs {
    let mut data = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    SequenceProbs::new(frames, classes, data).expect("rows built to shape")
}

fn random_simplex(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Contracts `y` with fixed random weights into a scalar.
fn project(g: &mut Graph, y: Var, seed: u64) -> mrn_autograd::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y), 1.5);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> mrn_autograd::Result<Var>>;

fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn s(shapes: &[&[usize]]) -> Vec<Vec<usize>> {
        shapes.iter().map(|s| s.to_vec()).collect()
    }
    vec![
        ("add", s(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", s(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", s(&[&[3, 4], &[3, 4]]), Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", s(&[&[3, 4]]), Box::new(|g, v| g.scale(v[0], -2.5))),
        ("sigmoid", s(&[&[3, 4]]), Box::new(|g, v| g.sigmoid(v[0]))),
        ("tanh", s(&[&[3, 4]]), Box::new(|g, v| g.tanh(v[0]))),
        ("relu", s(&[&[3, 4]]), Box::new(|g, v| g.relu(v[0]))),
        ("matmul", s(&[&[3, 4], &[4, 2]]), Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("linear", s(&[&[3, 4], &[4, 2], &[1, 2]]), Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        ("reshape", s(&[&[3, 4]]), Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        ("transpose", s(&[&[3, 4]]), Box::new(|g, v| g.transpose(v[0]))),
        ("permute", s(&[&[2, 3, 4]]), Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("concat", s(&[&[2, 3], &[2, 2]]), Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", s(&[&[3, 5]]), Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        ("split", s(&[&[3, 5]]), Box::new(|g, v| {
            let parts = g.split(v[0], 1, &[2, 3])?;
            let a = g.sum(parts[0])?;
            let b = g.scale(parts[1], 0.5)?;
            let b = g.sum(b)?;
            let a = g.reshape(a, &[1])?;
            let b = g.reshape(b, &[1])?;
            g.concat(&[a, b], 0)
        })),
        ("embedding", s(&[&[4, 3]]), Box::new(|g, v| g.embedding(v[0], &[2, 0, 2, 3]))),
        ("softmax", s(&[&[3, 4]]), Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax_axis0", s(&[&[3, 4]]), Box::new(|g, v| g.softmax(v[0], 0))),
        ("log_softmax", s(&[&[3, 4]]), Box::new(|g, v| g.log_softmax(v[0], 1))),
        ("layer_norm", s(&[&[2, 4, 3]]), Box::new(|g, v| g.layer_norm(v[0], 1))),
        ("mean", s(&[&[2, 3, 4]]), Box::new(|g, v| g.mean(v[0], 1))),
        ("sum", s(&[&[3, 4]]), Box::new(|g, v| g.sum(v[0]))),
        ("cross_entropy", s(&[&[3, 4]]), Box::new(|g, v| {
            let p = g.softmax(v[0], 1)?;
            g.cross_entropy(p, &[1, 3, 0])
        })),
        ("ctc", s(&[&[4, 4]]), Box::new(|g, v| {
            let p = g.softmax(v[0], 1)?;
            ctc_batch(g, p, 2, &[vec![1], vec![2, 3]]).map_err(ag).map(|o| o.loss.expect("feasible"))
        })),
        ("fuse", s(&[&[2, 3]]), Box::new(|g, v| {
            let w = g.softmax(v[0], 1)?;
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let probs: Vec<f64> = (0..6).flat_map(|_| random_probs(&mut rng, 2, 4).data().to_vec()).collect();
            fuse_var(g, w, Tensor::new([6, 8], probs)?, 2).map_err(ag)
        })),
    ]
}

/// Worst relative error over `cases` random draws of every primitive op.
pub fn op_gradients(cases: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (k, (name, shapes, op)) in op_table().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64 * 0x9e37_79b9));
        let mut worst = 0.0f64;
        for case in 0..cases {
            let xs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, 1.5)).collect();
            let err = grad_check_many(
                |g, v| {
                    let y = op(g, v)?;
                    project(g, y, case as u64)
                },
                &xs,
                EPS,
            )?;
            worst = worst.max(err);
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}

fn tiny_shape() -> BranchShape {
    BranchShape {
        frame: FrameConfig {
            height: 2,
            max_width: 8,
            frames: 4,
            stride: 2,
            window: 2,
            pool: 1,
        },
        channels: 3,
    }
}

/// Branch pipeline (frames, features, masked classifier, CTC) against every
/// branch parameter and the frames themselves.
pub fn branch_gradient(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut union = UnionCharset::new();
    union.extend(0, &[0, 1, 2])?;
    union.extend(1, &[0, 7, 8])?;
    let mask = union.mask(1)?;
    let branch = RecognizerBranch::new(1, tiny_shape(), &union, &mask, seed)?;
    let images: Vec<GrayImage> = [8, 6]
        .iter()
        .map(|&w| GrayImage {
            height: 2,
            width: w,
            pixels: (0..2 * w).map(|_| rng.gen::<f32>()).collect(),
        })
        .collect();
    let refs: Vec<&GrayImage> = images.iter().collect();
    let labels = vec![union.encode(&[7, 0])?, union.encode(&[8])?];
    let n = PARAM_NAMES.len();
    let mut xs: Vec<Tensor> = branch.params().iter().map(|(_, _, t)| t.clone()).collect();
    xs.push(branch.frames_of(&refs)?);
    let err = grad_check_many(
        |g, v| {
            let vars = BranchVars(v[..n].to_vec());
            let f = branch.features_var(g, &vars, v[n]).map_err(ag)?;
            let p = branch.classify_masked(g, &vars, f, &mask).map_err(ag)?;
            ctc_batch(g, p, 4, &labels).map_err(ag).map(|o| o.loss.expect("feasible"))
        },
        &xs,
        EPS,
    )?;
    Ok(err)
}

/// Full stage-II loss against every router parameter and the input cubic.
pub fn router_gradient(kind: RouterKind, depth: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, p, d, c, k) = (2, 3, rng.gen_range(2..=3), 3, 4);
    let router = Router::new(kind, p, d, c, depth, 5, seed)?;
    let mut xs: Vec<Tensor> = router.params().iter().map(|(_, _, t)| t.clone()).collect();
    for t in xs.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let n = xs.len();
    xs.push(random(&mut rng, &[batch, p, d, c], 1.0));
    let probs: Vec<f64> = (0..batch * d).flat_map(|_| random_probs(&mut rng, p, k).data().to_vec()).collect();
    let probs = Tensor::new([batch * d, p * k], probs)?;
    let labels = vec![vec![1], vec![2, 3]];
    let domains: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..d)).collect();
    let err = grad_check_many(
        |g, v| {
            let scores = router.forward_var(g, &v[..n], v[n]).map_err(ag)?;
            let fused = fuse_var(g, scores, probs.clone(), p).map_err(ag)?;
            let (loss, _) = stage2_loss_var(g, fused, p, &labels, scores, &domains, 15.0).map_err(ag)?;
            Ok(loss.expect("feasible").0)
        },
        &xs,
        EPS,
    )?;
    Ok(err)
}

/// Every op, the branch pipeline and both routers, `cases` draws each.
pub fn gradient_suite(cases: usize) -> Result<Check> {
    timed("gradient suite", || {
        let mut rows = op_gradients(cases, 0x5eed)?;
        let mut worst = |name: &str, f: &dyn Fn(u64) -> Result<f64>| -> Result<()> {
            let mut w = 0.0f64;
            for case in 0..cases as u64 {
                w = w.max(f(case)?);
            }
            rows.push((name.to_string(), w));
            Ok(())
        };
        worst("branch", &|c| branch_gradient(100 + c))?;
        worst("dm_router", &|c| router_gradient(RouterKind::Dm, 1 + (c % 2) as usize, c))?;
        worst("mlp_router", &|c| router_gradient(RouterKind::Mlp, 1, 1000 + c))?;
        let (name, max) = rows.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n.as_str(), *e) } else { acc });
        let passed = rows.iter().all(|(_, e)| *e < GRAD_TOL);
        Ok((passed, format!("{} checks x {cases} cases, max rel err {max:.2e} ({name})", rows.len())))
    })
}

/// Negative log of the summed probability of every frame path collapsing to `labels`.
pub fn enumerate_ctc(probs: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let frames = probs.len() / classes;
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    for code in 0..classes.pow(frames as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % classes;
            c /= classes;
        }
        let mut collapsed = Vec::with_capacity(frames);
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != BLANK {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == labels {
            total += path.iter().enumerate().map(|(t, &k)| probs[t * classes + k]).product::<f64>();
        }
    }
    -total.ln()
}

/// Dynamic-programming CTC against exhaustive path enumeration.
pub fn ctc_oracle(cases: usize, seed: u64) -> Result<Check> {
    timed("ctc oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < cases {
            let frames = rng.gen_range(1..=6);
            let classes = rng.gen_range(2..=4);
            let len = rng.gen_range(1..=3);
            let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..classes)).collect();
            if check_feasible(frames, &labels).is_err() {
                continue;
            }
            let probs = random_probs(&mut rng, frames, classes);
            let (dp, _) = ctc_loss_and_grad(probs.data(), classes, &labels)?;
            worst = worst.max((dp - enumerate_ctc(probs.data(), classes, &labels)).abs());
            done += 1;
        }
        Ok((worst < CTC_TOL, format!("{cases} instances, max |dp - enumeration| {worst:.2e}")))
    })
}

/// Row sums, one-hot endpoints and hard voting against the argmax branch.
pub fn fusion_algebra(cases: usize, seed: u64) -> Result<Check> {
    timed("fusion algebra", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = Vec::new();
        let mut row_err = 0.0f64;
        for case in 0..cases {
            let d = rng.gen_range(1..=5);
            let (t, k) = (rng.gen_range(1..=8), rng.gen_range(2..=7));
            let probs: Vec<SequenceProbs> = (0..d).map(|_| random_probs(&mut rng, t, k)).collect();
            let w = random_simplex(&mut rng, d);
            let f = fuse(&w, &probs)?;
            row_err = row_err.max(f.max_row_error());
            if f.max_row_error() > 1e-9 {
                failures.push(format!("case {case}: row sum"));
            }
            let pick = rng.gen_range(0..d);
            let one_hot: Vec<f64> = (0..d).map(|j| if j == pick { 1.0 } else { 0.0 }).collect();
            if fuse(&one_hot, &probs)? != probs[pick] {
                failures.push(format!("case {case}: one-hot endpoint"));
            }
            let scores = DomainScores(w);
            let hard = fuse(&quantize(&scores, VotingMode::Hard), &probs)?;
            if hard.decode() != probs[scores.argmax()].decode() {
                failures.push(format!("case {case}: hard voting"));
            }
        }
        let detail = if failures.is_empty() {
            format!("{cases} cases, max row-sum error {row_err:.1e}")
        } else {
            failures.join("; ")
        };
        Ok((failures.is_empty(), detail))
    })
}

/// One-language schedule: routed predictions equal the lone branch's decode.
pub fn degenerate_protocol(cfg: &ExperimentConfig, cache: &mut ModelCache) -> Result<Check> {
    timed("degenerate protocol", || {
        let mut one = cfg.clone();
        one.order.truncate(1);
        let (report, art) = run_schedule(&one, cache)?;
        let (_, datasets) = cache.datasets(&one)?;
        let branch = &art.branches[0];
        let images: Vec<&GrayImage> = datasets[0].test.iter().map(|i| &i.image).collect();
        let alone = branch.predict_union(&images, &branch.own_mask(&art.union)?, &art.union)?;
        let mut mismatches = 0;
        for (p, probs) in report.predictions.iter().zip(&alone) {
            if p.predicted != art.union.decode(&probs.decode())? || p.scores != [1.0] {
                mismatches += 1;
            }
        }
        let passed = mismatches == 0 && report.predictions.len() == images.len();
        Ok((passed, format!("{} test instances, {mismatches} differ from the standalone branch", images.len())))
    })
}

/// Branch checksums and gradient mass recorded by every stage II of `report`.
pub fn frozen_audit(report: &RunReport) -> Check {
    let logs: Vec<_> = report.steps.iter().filter_map(|s| s.stage2.as_ref()).collect();
    let changed = logs.iter().filter(|l| !l.branches_unchanged).count();
    let mass: f64 = logs.iter().map(|l| l.frozen_gradient_mass).sum();
    Check {
        name: "frozen-branch audit".into(),
        passed: changed == 0 && mass == 0.0 && report.audit_violations == 0,
        detail: format!(
            "{} stage-II runs, {changed} checksum changes, gradient mass {mass}, {} data-access violations",
            logs.len(),
            report.audit_violations
        ),
        seconds: 0.0,
    }
}

/// The full suite; training checks run on `cfg` (typically the smoke config).
pub fn run_all(cfg: &ExperimentConfig, cache: &mut ModelCache) -> Result<Vec<Check>> {
    let mut checks = vec![gradient_suite(100)?, ctc_oracle(500, 0xc7c)?, fusion_algebra(200, 17)?];
    checks.push(degenerate_protocol(cfg, cache)?);
    let started = Instant::now();
    let (report, _) = run_schedule(cfg, cache)?;
    let mut audit = frozen_audit(&report);
    audit.seconds = started.elapsed().as_secs_f64();
    checks.push(audit);
    Ok(checks)
}
