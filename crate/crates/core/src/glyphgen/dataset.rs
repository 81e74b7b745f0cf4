use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::{make_script, render_instance, sample_label_sequence, CharsetRegistry, GlobalId, ScriptSpec, TextInstance, Zipf};
use crate::error::Result;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub script_id: u8,
    pub train: Vec<TextInstance>,
    pub test: Vec<TextInstance>,
    /// Local charset as global ids, in local-index order.
    pub charset: Vec<GlobalId>,
    /// Categories of the charset that never occur in the train split.
    pub absent_from_train: Vec<GlobalId>,
}

fn fingerprint(labels: &[usize], pixels: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    labels.hash(&mut h);
    for p in pixels {
        p.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Generates the train and test splits of one script. Test instances that
/// coincide with a train instance are redrawn, so the splits are disjoint.
pub fn build_task_dataset(spec: &ScriptSpec, registry: &CharsetRegistry) -> Result<TaskDataset> {
    let prototypes = make_script(spec, registry.shared)?;
    let charset = registry.charset(spec.script_id)?.to_vec();
    if charset.len() != spec.charset_size {
        return Err(crate::MrnError::Registry(format!(
            "script {} registered with {} categories, spec has {}",
            spec.script_id,
            charset.len(),
            spec.charset_size
        )));
    }
    let zipf = Zipf::new(spec.charset_size, spec.zipf_s);
    let mut seen = HashSet::new();
    let mut split = |label: &str, n: usize, exclusive: bool| -> Result<Vec<TextInstance>> {
        let mut rng = rng::stream(spec.seed, rng::label(label));
        let mut out = Vec::with_capacity(n);
        let mut draws = 0usize;
        while out.len() < n {
            draws += 1;
            if draws > 1000 * n.max(1) {
                return Err(crate::error::contract(format!(
                    "script {}: cannot draw {n} {label} instances distinct from the other split",
                    spec.script_id
                )));
            }
            let labels = sample_label_sequence(spec, &zipf, &mut rng);
            let image = render_instance(&prototypes, &labels, &spec.noise, &mut rng)?;
            let fp = fingerprint(&labels, &image.pixels);
            let fresh = seen.insert(fp);
            if exclusive && !fresh {
                continue;
            }
            out.push(TextInstance {
                image,
                labels: labels.iter().map(|&l| charset[l]).collect(),
                language_id: spec.script_id,
            });
        }
        Ok(out)
    };
    let train = split("train", spec.n_train, false)?;
    let test = split("test", spec.n_test, true)?;

    let present: HashSet<GlobalId> = train.iter().flat_map(|i| i.labels.iter().copied()).collect();
    let absent_from_train = charset.iter().copied().filter(|c| !present.contains(c)).collect();
    Ok(TaskDataset {
        script_id: spec.script_id,
        train,
        test,
        charset,
        absent_from_train,
    })
}
