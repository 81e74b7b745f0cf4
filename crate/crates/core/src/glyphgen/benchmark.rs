use super::{NoiseConfig, ScriptSpec, StrokeStyle, DEFAULT_MAX_LEN};

/// MLT17 per-script train instance counts (Chinese, Latin, Japanese, Korean).
pub const MLT17_TRAIN: [usize; 4] = [2687, 47411, 4609, 5631];
/// MLT17 per-script test instance counts, same order.
pub const MLT17_TEST: [usize; 4] = [529, 11073, 1350, 1230];

const TRAIN_BUDGET: usize = 6000;

/// Scales `counts` by `budget / sum(train)` with round-half-up.
pub fn scaled_counts(counts: &[usize], train_total: usize, budget: usize) -> Vec<usize> {
    counts
        .iter()
        .map(|&c| ((c * budget) as f64 / train_total as f64).round() as usize)
        .collect()
}

/// Four scripts echoing the MLT17 data- and class-imbalance at desk scale.
/// Script ids follow the default task order.
pub fn default_benchmark() -> Vec<ScriptSpec> {
    let total: usize = MLT17_TRAIN.iter().sum();
    let train = scaled_counts(&MLT17_TRAIN, total, TRAIN_BUDGET);
    let test = scaled_counts(&MLT17_TEST, total, TRAIN_BUDGET);
    let shape: [(&str, usize, [u32; 2], StrokeStyle, f64); 4] = [
        ("dense-angular", 60, [3, 4], StrokeStyle::Angular, 1.0),
        ("latin-like", 20, [1, 2], StrokeStyle::Curved, 1.0),
        ("dotted", 80, [2, 3], StrokeStyle::Dotted, 1.2),
        ("sparse-angular", 30, [1, 2], StrokeStyle::Angular, 1.0),
    ];
    shape
        .iter()
        .enumerate()
        .map(|(i, &(name, size, strokes, style, s))| ScriptSpec {
            script_id: i as u8,
            name: name.to_string(),
            charset_size: size,
            stroke_count: strokes,
            stroke_style: style,
            zipf_s: s,
            n_train: train[i],
            n_test: test[i],
            seed: 1000 + i as u64,
            max_len: DEFAULT_MAX_LEN,
            noise: NoiseConfig::default(),
        })
        .collect()
}
