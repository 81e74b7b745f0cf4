use std::collections::HashSet;

use mrn_core::glyphgen::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(size: usize, style: StrokeStyle, s: f64) -> ScriptSpec {
    ScriptSpec {
        script_id: 0,
        name: "t".into(),
        charset_size: size,
        stroke_count: [1, 3],
        stroke_style: style,
        zipf_s: s,
        n_train: 20,
        n_test: 10,
        seed: 42,
        max_len: DEFAULT_MAX_LEN,
        noise: NoiseConfig::default(),
    }
}

fn registry_for(s: &ScriptSpec) -> CharsetRegistry {
    CharsetRegistry::new(std::slice::from_ref(s), 3).unwrap()
}

/// P(category absent from one instance) with length uniform in 1..=max_len.
fn absent_one(p: f64, max_len: usize) -> f64 {
    (1..=max_len).map(|l| (1.0 - p).powi(l as i32)).sum::<f64>() / max_len as f64
}

#[test]
fn make_script_is_deterministic() {
    let s = spec(30, StrokeStyle::Curved, 1.0);
    assert_eq!(make_script(&s, 3).unwrap(), make_script(&s, 3).unwrap());
}

#[test]
fn two_category_script_is_pairwise_distinct() {
    let protos = make_script(&spec(2, StrokeStyle::Angular, 1.0), 3).unwrap();
    assert_eq!(protos.len(), 2);
    assert!(protos[0].bitmap.iter().zip(&protos[1].bitmap).any(|(a, b)| (a - b).abs() > 0.1));
}

#[test]
fn prototypes_are_inked_and_distinct() {
    for style in [StrokeStyle::Angular, StrokeStyle::Curved, StrokeStyle::Dotted] {
        let protos = make_script(&spec(80, style, 1.0), 3).unwrap();
        for (i, p) in protos.iter().enumerate() {
            assert!(p.bitmap.iter().any(|&v| v > 0.5));
            for q in &protos[..i] {
                assert!(p.bitmap.iter().zip(&q.bitmap).any(|(a, b)| (a - b).abs() > 0.1));
            }
        }
    }
}

#[test]
fn charset_below_two_is_rejected() {
    assert!(make_script(&spec(1, StrokeStyle::Angular, 1.0), 3).is_err());
}

#[test]
fn stroke_styles_look_different() {
    // measured: angular/curved 0.106, angular/dotted 0.120, curved/dotted 0.077
    let styles = [StrokeStyle::Angular, StrokeStyle::Curved, StrokeStyle::Dotted];
    for (i, &a) in styles.iter().enumerate() {
        for &b in &styles[i + 1..] {
            let pa = make_script(&spec(40, a, 1.0), 3).unwrap();
            let pb = make_script(&spec(40, b, 1.0), 3).unwrap();
            let n = (pa.len() * GLYPH_SIZE * GLYPH_SIZE) as f64;
            let l1: f64 = pa
                .iter()
                .zip(&pb)
                .flat_map(|(x, y)| x.bitmap.iter().zip(&y.bitmap))
                .map(|(u, v)| (u - v).abs() as f64)
                .sum::<f64>()
                / n;
            assert!(l1 > 0.05, "{a:?} vs {b:?}: {l1}");
        }
    }
}

#[test]
fn zipf_zero_is_uniform() {
    let z = Zipf::new(4, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[z.sample(&mut rng)] += 1;
    }
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn zipf_one_over_three_is_harmonic() {
    let p = zipf_probabilities(3, 1.0);
    let expected = [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0];
    for (a, b) in p.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zipf_two_rank_ratio_matches_square_law() {
    let z = Zipf::new(50, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = [0usize; 50];
    for _ in 0..1_000_000 {
        counts[z.sample(&mut rng)] += 1;
    }
    let ratio = counts[0] as f64 / counts[9] as f64;
    assert!((ratio - 100.0).abs() < 20.0, "ratio {ratio}");
}

#[test]
fn label_lengths_cover_the_range() {
    let s = spec(10, StrokeStyle::Angular, 1.0);
    let z = Zipf::new(10, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lens: HashSet<usize> = (0..5000).map(|_| sample_label_sequence(&s, &z, &mut rng).len()).collect();
    assert_eq!(lens, (1..=DEFAULT_MAX_LEN).collect());
}

#[test]
fn clean_render_of_single_glyph_is_the_prototype() {
    let protos = make_script(&spec(5, StrokeStyle::Dotted, 1.0), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..5 {
        let img = render_instance(&protos, &[k], &NoiseConfig::clean(), &mut rng).unwrap();
        assert_eq!((img.height, img.width), (GLYPH_SIZE, GLYPH_SIZE));
        assert_eq!(img.pixels, protos[k].bitmap);
    }
}

#[test]
fn width_is_length_times_advance() {
    let protos = make_script(&spec(5, StrokeStyle::Angular, 1.0), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = render_instance(&protos, &[0, 1, 2, 3, 4], &NoiseConfig::clean(), &mut rng).unwrap();
    assert_eq!(img.width, 80);
}

#[test]
fn empty_labels_are_rejected() {
    let protos = make_script(&spec(5, StrokeStyle::Angular, 1.0), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(render_instance(&protos, &[], &NoiseConfig::default(), &mut rng).is_err());
}

#[test]
fn gaussian_noise_level() {
    let protos = make_script(&spec(20, StrokeStyle::Curved, 1.0), 3).unwrap();
    let noisy = NoiseConfig {
        sigma: 0.1,
        ..NoiseConfig::default()
    };
    let clean = NoiseConfig { sigma: 0.0, ..noisy };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut total, mut count) = (0.0, 0usize);
    for _ in 0..200 {
        let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..20)).collect();
        let seed = rng.gen::<u64>();
        let a = render_instance(&protos, &labels, &noisy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = render_instance(&protos, &labels, &clean, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        total += a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
        count += a.pixels.len();
    }
    let mean = total / count as f64;
    assert!((0.06..=0.10).contains(&mean), "mean abs noise {mean}");
}

#[test]
fn empty_train_split_is_valid() {
    let mut s = spec(10, StrokeStyle::Angular, 1.0);
    s.n_train = 0;
    let d = build_task_dataset(&s, &registry_for(&s)).unwrap();
    assert!(d.train.is_empty());
    assert_eq!(d.test.len(), 10);
    assert_eq!(d.absent_from_train.len(), 10);
}

#[test]
fn datasets_are_bit_reproducible_and_disjoint() {
    let s = spec(20, StrokeStyle::Curved, 1.0);
    let reg = registry_for(&s);
    let a = build_task_dataset(&s, &reg).unwrap();
    let b = build_task_dataset(&s, &reg).unwrap();
    assert_eq!(a, b);
    for t in &a.test {
        assert!(!a.train.contains(t));
    }
    for inst in a.train.iter().chain(&a.test) {
        assert!((1..=DEFAULT_MAX_LEN).contains(&inst.len()));
        assert_eq!(inst.image.width, inst.len() * GLYPH_ADVANCE);
        assert!(inst.labels.iter().all(|&l| reg.contains(l)));
    }
}

#[test]
fn clean_duplicate_instances_never_cross_splits() {
    // two categories, length <= 2 and no noise: only six distinct images exist
    let mut s = spec(2, StrokeStyle::Angular, 0.0);
    s.max_len = 2;
    s.noise = NoiseConfig::clean();
    s.n_train = 3;
    s.n_test = 2;
    let d = build_task_dataset(&s, &registry_for(&s)).unwrap();
    for t in &d.test {
        assert!(!d.train.contains(t));
    }
}

#[test]
fn absence_report_matches_zipf_model() {
    let mut s = spec(100, StrokeStyle::Angular, 1.0);
    s.n_train = 30;
    s.n_test = 1;
    let reg = registry_for(&s);
    let d = build_task_dataset(&s, &reg).unwrap();
    let present: HashSet<GlobalId> = d.train.iter().flat_map(|i| i.labels.clone()).collect();
    let expected: Vec<GlobalId> = d.charset.iter().copied().filter(|c| !present.contains(c)).collect();
    assert_eq!(d.absent_from_train, expected);
    assert!(!d.absent_from_train.is_empty());

    // analytic per-category absence vs simulation over label sequences only
    let p = zipf_probabilities(100, 1.0);
    let analytic: Vec<f64> = p.iter().map(|&pc| absent_one(pc, 25).powi(30)).collect();
    let z = Zipf::new(100, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let trials = 4000;
    let mut hits = vec![0usize; 100];
    for _ in 0..trials {
        let mut seen = [false; 100];
        for _ in 0..30 {
            for c in sample_label_sequence(&s, &z, &mut rng) {
                seen[c] = true;
            }
        }
        for (h, s) in hits.iter_mut().zip(seen) {
            *h += usize::from(!s);
        }
    }
    for c in [0, 10, 50, 99] {
        let emp = hits[c] as f64 / trials as f64;
        let sd = (analytic[c] * (1.0 - analytic[c]) / trials as f64).sqrt().max(1e-3);
        assert!((emp - analytic[c]).abs() < 4.0 * sd, "category {c}: {emp} vs {}", analytic[c]);
    }
    let expected_absent: f64 = analytic.iter().sum();
    assert!(expected_absent > 5.0, "{expected_absent}");
}

#[test]
fn default_benchmark_matches_mlt17_ratios() {
    let specs = default_benchmark();
    let train: Vec<usize> = specs.iter().map(|s| s.n_train).collect();
    assert_eq!(train, vec![267, 4715, 458, 560]);
    assert_eq!(train.iter().sum::<usize>(), 6000);
    let sizes: Vec<usize> = specs.iter().map(|s| s.charset_size).collect();
    assert_eq!(sizes, vec![60, 20, 80, 30]);
    for s in &specs {
        s.validate().unwrap();
    }
}

#[test]
fn rehearsal_scale_subsample_misses_a_category() {
    // inclusion-exclusion over the 14 rarest categories of the 80-char script
    // lower-bounds P(some category absent from 50 random instances)
    let specs = default_benchmark();
    let big = specs.iter().max_by_key(|s| s.charset_size).unwrap();
    let p = zipf_probabilities(big.charset_size, big.zipf_s);
    let tail: Vec<f64> = p[p.len() - 14..].to_vec();
    let mut union = 0.0;
    for mask in 1u32..(1 << tail.len()) {
        let mass: f64 = (0..tail.len()).filter(|i| mask >> i & 1 == 1).map(|i| tail[i]).sum();
        let all_absent = absent_one(mass, big.max_len).powi(50);
        let sign = if mask.count_ones() % 2 == 1 { 1.0 } else { -1.0 };
        union += sign * all_absent;
    }
    assert!(union > 0.99, "lower bound {union}");
}

#[test]
fn train_histogram_is_long_tailed() {
    let specs = default_benchmark();
    let s = &specs[1];
    let reg = CharsetRegistry::new(&specs, 3).unwrap();
    let d = build_task_dataset(s, &reg).unwrap();
    let mut counts = vec![0usize; s.charset_size];
    for inst in &d.train {
        for l in &inst.labels {
            counts[d.charset.iter().position(|c| c == l).unwrap()] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    let p = zipf_probabilities(s.charset_size, s.zipf_s);
    for r in 1..counts.len() {
        // successive ranks may only invert within a 3-sigma multinomial band
        let band = 3.0 * ((n as f64 * p[r - 1] * (1.0 - p[r - 1])).sqrt() + (n as f64 * p[r] * (1.0 - p[r])).sqrt());
        assert!(counts[r] as f64 <= counts[r - 1] as f64 + band, "rank {r}: {counts:?}");
    }
}
