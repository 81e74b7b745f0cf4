use mrn_autograd::{grad_check_many, AutogradError, Graph, Tensor};
use mrn_core::glyphgen::{build_task_dataset, default_benchmark, CharsetRegistry, GrayImage};
use mrn_core::recognizer::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn tiny_union() -> UnionCharset {
    let mut u = UnionCharset::new();
    u.extend(0, &[0, 1, 2]).unwrap();
    u.extend(1, &[0, 7, 8]).unwrap();
    u
}

fn random_image(rng: &mut ChaCha8Rng, height: usize, width: usize) -> GrayImage {
    GrayImage {
        height,
        width,
        pixels: (0..height * width).map(|_| rng.gen::<f32>()).collect(),
    }
}

fn to_ag(e: mrn_core::MrnError) -> AutogradError {
    AutogradError::Invalid(e.to_string())
}

/// Sum over all `classes^frames` paths whose collapse equals `labels`.
fn brute_force_ctc(probs: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let frames = probs.len() / classes;
    let mut total = 0.0;
    for code in 0..classes.pow(frames as u32) {
        let mut path = Vec::with_capacity(frames);
        let mut c = code;
        for _ in 0..frames {
            path.push(c % classes);
            c /= classes;
        }
        let mut collapsed = Vec::new();
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

fn random_rows(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / s));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]
    #[test]
    fn ctc_matches_path_enumeration(seed in any::<u64>(), frames in 1usize..=6, classes in 2usize..=4, len in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..classes)).collect();
        prop_assume!(check_feasible(frames, &labels).is_ok());
        let probs = random_rows(&mut rng, frames, classes);
        let (loss, _) = ctc_loss_and_grad(&probs, classes, &labels).unwrap();
        let oracle = brute_force_ctc(&probs, classes, &labels);
        prop_assert!((loss - oracle).abs() < 1e-8, "dp {loss} vs enumeration {oracle}");
    }
}

#[test]
fn ctc_spec_values() {
    let (l1, _) = ctc_loss_and_grad(&[0.5, 0.5], 2, &[1]).unwrap();
    assert!((l1 - 0.6931).abs() < 1e-4);
    let (l2, _) = ctc_loss_and_grad(&[0.5; 4], 2, &[1]).unwrap();
    assert!((l2 - 0.2877).abs() < 1e-4);
}

#[test]
fn ctc_gradient_on_three_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let logits = Tensor::from_fn([3, 4], |_| rng.gen_range(-2.0..2.0));
        let labels = vec![rng.gen_range(1..4usize), rng.gen_range(1..4usize)];
        if check_feasible(3, &labels).is_err() {
            continue;
        }
        let err = grad_check_many(
            |g, v| {
                let p = g.softmax(v[0], 1)?;
                ctc_batch(g, p, 3, std::slice::from_ref(&labels)).map_err(to_ag).map(|o| o.loss.unwrap())
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn infeasible_samples_are_skipped() {
    let mut g = Graph::new();
    let p = g.param(Tensor::full([4, 3], 1.0 / 3.0));
    let out = ctc_batch(&mut g, p, 2, &[vec![1, 1], vec![2]]).unwrap();
    assert_eq!(out.skipped, 1);
    assert!(out.loss.is_some());
    let out = ctc_batch(&mut g, p, 2, &[vec![1, 2, 1], vec![2, 2]]).unwrap();
    assert_eq!(out.skipped, 2);
    assert!(out.loss.is_none());
}

#[test]
fn ctc_through_masked_classifier_matches_finite_differences() {
    let shape = tiny_shape();
    let union = tiny_union();
    let mask = union.mask(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let branch = RecognizerBranch::new(1, shape, &union, &mask, 5).unwrap();
    let images = [random_image(&mut rng, 2, 8), random_image(&mut rng, 2, 6)];
    let refs: Vec<&GrayImage> = images.iter().collect();
    let frames = branch.frames_of(&refs).unwrap();
    let labels = vec![union.encode(&[7, 0]).unwrap(), union.encode(&[8]).unwrap()];
    let mut inputs: Vec<Tensor> = branch.params().iter().map(|(_, _, t)| t.clone()).collect();
    inputs.push(frames);
    let err = grad_check_many(
        |g, v| {
            let vars = BranchVars(v[..8].to_vec());
            let f = branch.features_var(g, &vars, v[8]).map_err(to_ag)?;
            let p = branch.classify_masked(g, &vars, f, &mask).map_err(to_ag)?;
            ctc_batch(g, p, 4, &labels).map_err(to_ag).map(|o| o.loss.unwrap())
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn masked_rows_and_truncated_gradients() {
    let shape = tiny_shape();
    let union = tiny_union();
    let mask = union.mask(0).unwrap();
    let branch = RecognizerBranch::new(0, shape, &union, &union.full_mask(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 2, 8);
    let mut g = Graph::new();
    let v = branch.register(&mut g, true);
    let x = g.constant(branch.frames_of(&[&img]).unwrap());
    let f = branch.features_var(&mut g, &v, x).unwrap();
    let p = branch.classify_masked(&mut g, &v, f, &mask).unwrap();
    let probs = g.value(p).clone();
    for row in probs.data().chunks(union.width()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (j, &m) in mask.iter().enumerate() {
            if m {
                assert!(row[j] > 0.0);
            } else {
                assert_eq!(row[j], 0.0);
            }
        }
    }
    let loss = ctc_batch(&mut g, p, 4, &[union.encode(&[1, 2]).unwrap()]).unwrap().loss.unwrap();
    let grads = g.backward(loss).unwrap();
    let (gw, gb) = (grads.get(v.0[6]), grads.get(v.0[7]));
    let k = union.width();
    for (j, &m) in mask.iter().enumerate() {
        if !m {
            assert_eq!(gb.data()[j], 0.0);
            assert!(gw.data().iter().skip(j).step_by(k).all(|&x| x == 0.0));
        }
    }
}

#[test]
fn masked_uniform_example() {
    let mut u = UnionCharset::new();
    u.extend(0, &[10, 11]).unwrap();
    u.extend(1, &[12, 13]).unwrap();
    let shape = BranchShape {
        channels: 2,
        ..tiny_shape()
    };
    let branch = RecognizerBranch::zeroed(0, shape, &u).unwrap();
    let mut g = Graph::new();
    let v = branch.register(&mut g, false);
    let feats = g.constant(Tensor::zeros([1, 2]));
    let p = branch.classify_masked(&mut g, &v, feats, &u.mask(0).unwrap()).unwrap();
    let third = 1.0 / 3.0;
    assert_eq!(g.value(p).data(), &[third, third, third, 0.0, 0.0]);
    let full = branch.classify_masked(&mut g, &v, feats, &u.full_mask()).unwrap();
    let unmasked = g.linear(feats, v.0[6], v.0[7]).unwrap();
    let unmasked = g.softmax(unmasked, 1).unwrap();
    assert_eq!(g.value(full).data(), g.value(unmasked).data());
}

#[test]
fn zero_skeleton_gives_zero_features() {
    let union = tiny_union();
    let branch = RecognizerBranch::zeroed(0, tiny_shape(), &union).unwrap();
    let img = GrayImage {
        height: 2,
        width: 8,
        pixels: vec![0.0; 16],
    };
    let f = branch.extract_features(&img).unwrap();
    assert_eq!(f.shape(), &[4, 3]);
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn features_are_deterministic_and_height_checked() {
    let union = tiny_union();
    let branch = RecognizerBranch::new(0, tiny_shape(), &union, &union.mask(0).unwrap(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&mut rng, 2, 7);
    assert_eq!(branch.extract_features(&img).unwrap(), branch.extract_features(&img).unwrap());
    let tall = random_image(&mut rng, 3, 7);
    assert!(matches!(branch.extract_features(&tall), Err(mrn_core::MrnError::Contract(_))));
}

#[test]
fn frozen_branch_records_nothing_and_gets_no_gradient() {
    let union = tiny_union();
    let mut branch = RecognizerBranch::new(0, tiny_shape(), &union, &union.mask(0).unwrap(), 1).unwrap();
    branch.freeze();
    let before = branch.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng, 2, 8);
    let mut g = Graph::new();
    let v = branch.register(&mut g, true);
    let x = g.param(branch.frames_of(&[&img]).unwrap());
    let f = branch.features_var(&mut g, &v, x).unwrap();
    let loss = g.sum(f).unwrap();
    let grads = g.backward(loss).unwrap();
    for &p in &v.0 {
        assert!(!g.requires_grad(p));
        assert!(!grads.is_reached(p));
        assert!(grads.get(p).data().iter().all(|&x| x == 0.0));
    }
    assert!(grads.is_reached(x));
    assert!(branch.params_mut().is_err());
    assert!(branch.widen(&union).is_err());
    assert_eq!(branch.checksum(), before);

    let mut g = Graph::new();
    let v = branch.register(&mut g, true);
    let x = g.constant(branch.frames_of(&[&img]).unwrap());
    branch.features_var(&mut g, &v, x).unwrap();
    assert_eq!(g.tracked_len(), 0);
}

#[test]
fn widening_preserves_old_outputs_bitwise() {
    let mut union = UnionCharset::new();
    union.extend(0, &[0, 1, 2, 3]).unwrap();
    let mut branch = RecognizerBranch::new(0, tiny_shape(), &union, &union.mask(0).unwrap(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let imgs: Vec<GrayImage> = (0..5).map(|_| random_image(&mut rng, 2, 8)).collect();
    let refs: Vec<&GrayImage> = imgs.iter().collect();
    let before = branch.predict_union(&refs, &branch.own_mask(&union).unwrap(), &union).unwrap();
    union.extend(1, &[0, 9, 10, 11]).unwrap();
    branch.widen(&union).unwrap();
    assert_eq!(branch.classes(), union.width());
    let after = branch.predict_batch(&refs, &union.mask(0).unwrap()).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(&a.data()[..], &pad_to_union(b, &union.entries()[..4], &union).unwrap().data()[..]);
        for t in 0..a.frames() {
            assert_eq!(&a.row(t)[..5], b.row(t));
            assert!(a.row(t)[5..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn shared_ids_land_in_one_union_column() {
    let union = tiny_union();
    let a = SequenceProbs::new(1, 4, vec![0.1, 0.6, 0.2, 0.1]).unwrap();
    let b = SequenceProbs::new(1, 4, vec![0.2, 0.5, 0.2, 0.1]).unwrap();
    let pa = pad_to_union(&a, &[0, 1, 2], &union).unwrap();
    let pb = pad_to_union(&b, &[0, 7, 8], &union).unwrap();
    let col = union.index_of(0).unwrap();
    assert_eq!(pa.row(0)[col], 0.6);
    assert_eq!(pb.row(0)[col], 0.5);
    assert!((pb.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn training_is_bitwise_deterministic() {
    let union = tiny_union();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let imgs: Vec<GrayImage> = (0..6).map(|_| random_image(&mut rng, 2, 8)).collect();
    let samples: Vec<(&GrayImage, Vec<usize>)> = imgs.iter().map(|i| (i, vec![1, 2])).collect();
    let mask = union.mask(0).unwrap();
    let cfg = TrainConfig {
        iterations: 30,
        batch: 4,
        max_lr: 1e-2,
        seed: 3,
    };
    let run = || {
        let mut b = RecognizerBranch::new(0, tiny_shape(), &union, &mask, 3).unwrap();
        let rep = fit(&mut b, &samples, &mask, &cfg, "t").unwrap();
        (b.checksum(), rep)
    };
    let (c1, r1) = run();
    let (c2, r2) = run();
    assert_eq!(c1, c2);
    assert_eq!(r1, r2);
}

#[test]
fn all_infeasible_training_is_impossible() {
    let union = tiny_union();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, 2, 8);
    let samples = vec![(&img, vec![1, 2, 1, 2, 1])];
    let mask = union.mask(0).unwrap();
    let mut b = RecognizerBranch::new(0, tiny_shape(), &union, &mask, 3).unwrap();
    let err = fit(&mut b, &samples, &mask, &TrainConfig::default(), "t").unwrap_err();
    assert!(matches!(err, mrn_core::MrnError::TrainingImpossible(_)));
}

#[test]
fn word_accuracy_is_exact_match() {
    let p = vec![vec![1, 2], vec![3], vec![]];
    let t = vec![vec![1, 2], vec![3, 3], vec![]];
    assert!((word_accuracy(&p, &t) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn easy_script_branch_learns() {
    let specs = default_benchmark();
    let registry = CharsetRegistry::new(&specs, 3).unwrap();
    let easy = specs.iter().find(|s| s.charset_size == 20).unwrap();
    let data = build_task_dataset(easy, &registry).unwrap();
    let mut union = UnionCharset::new();
    union.extend(easy.script_id, &data.charset).unwrap();
    let cfg = TrainConfig {
        max_lr: 5e-3,
        ..TrainConfig::default()
    };
    let (branch, report) = train_branch(&data, &union, BranchShape::default(), &cfg).unwrap();
    assert!(branch.is_frozen());
    assert!(report.final_loss() < report.initial_loss());
    let images: Vec<&GrayImage> = data.test.iter().map(|i| &i.image).collect();
    let probs = branch.predict_union(&images, &branch.own_mask(&union).unwrap(), &union).unwrap();
    let predicted: Vec<_> = probs.iter().map(|p| union.decode(&p.decode()).unwrap()).collect();
    let truth: Vec<_> = data.test.iter().map(|i| i.labels.clone()).collect();
    let acc = word_accuracy(&predicted, &truth);
    assert!(acc >= 0.85, "easy-script word accuracy {acc}");
}
