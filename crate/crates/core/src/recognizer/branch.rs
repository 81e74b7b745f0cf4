use mrn_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::charset::UnionCharset;
use super::frames::FrameConfig;
use super::probs::{pad_to_union, SequenceProbs};
use crate::error::{contract, Result};
use crate::glyphgen::{GlobalId, GrayImage};
use crate::rng;

/// Additive logit offset for entries outside a branch's charset.
pub const MASK_LOGIT: f64 = -1e30;

pub const PARAM_NAMES: [&str; 8] = ["embed.w", "embed.b", "frame.w", "frame.b", "mix.w", "mix.b", "cls.w", "cls.b"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchShape {
    pub frame: FrameConfig,
    pub channels: usize,
}

impl Default for BranchShape {
    fn default() -> Self {
        BranchShape {
            frame: FrameConfig::default(),
            channels: 32,
        }
    }
}

/// Per-branch skeleton and classifier. The classifier covers a prefix of the
/// union, `snapshot`, as it stood when the branch was built or last widened.
#[derive(Clone, Debug)]
pub struct RecognizerBranch {
    pub language_id: u8,
    pub shape: BranchShape,
    params: ParamStore,
    snapshot: Vec<GlobalId>,
    frozen: bool,
}

/// Graph handles of a branch's parameters, in [`PARAM_NAMES`] order.
#[derive(Clone, Debug)]
pub struct BranchVars(pub Vec<Var>);

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| rng.gen_range(-a..a))
}

impl RecognizerBranch {
    /// Random skeleton; classifier columns outside `mask` start at zero.
    pub fn new(language_id: u8, shape: BranchShape, union: &UnionCharset, mask: &[bool], seed: u64) -> Result<Self> {
        shape.frame.validate()?;
        let k = union.width();
        if mask.len() != k {
            return Err(contract(format!("mask width {} != union width {k}", mask.len())));
        }
        let (f, c, t) = (shape.frame.features(), shape.channels, shape.frame.frames);
        let mut r = rng::stream(seed, rng::label("branch-init"));
        let mut params = ParamStore::new();
        params.add("embed.w", xavier(&mut r, f, c));
        params.add("embed.b", Tensor::zeros([1, c]));
        params.add("frame.w", xavier(&mut r, c, c));
        params.add("frame.b", Tensor::zeros([1, c]));
        params.add("mix.w", xavier(&mut r, t, t));
        params.add("mix.b", Tensor::zeros([1, t]));
        let active = mask.iter().filter(|&&m| m).count();
        let a = (6.0 / (c + active) as f64).sqrt();
        let mut w = Tensor::zeros([c, k]);
        for row in 0..c {
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    w.data_mut()[row * k + j] = r.gen_range(-a..a);
                }
            }
        }
        params.add("cls.w", w);
        params.add("cls.b", Tensor::zeros([1, k]));
        Ok(RecognizerBranch {
            language_id,
            shape,
            params,
            snapshot: union.entries().to_vec(),
            frozen: false,
        })
    }

    /// Every parameter zero.
    pub fn zeroed(language_id: u8, shape: BranchShape, union: &UnionCharset) -> Result<Self> {
        let mut b = Self::new(language_id, shape, union, &union.full_mask(), 0)?;
        let ids: Vec<_> = b.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            b.params.get_mut(id).data_mut().fill(0.0);
        }
        Ok(b)
    }

    pub fn from_parts(language_id: u8, shape: BranchShape, params: ParamStore, snapshot: Vec<GlobalId>, frozen: bool) -> Result<Self> {
        let names: Vec<&str> = params.iter().map(|(_, n, _)| n).collect();
        if names != PARAM_NAMES {
            return Err(contract(format!("branch parameters {names:?} do not match the expected layout")));
        }
        let b = RecognizerBranch {
            language_id,
            shape,
            params,
            snapshot,
            frozen,
        };
        let (f, c, t, k) = (shape.frame.features(), shape.channels, shape.frame.frames, b.classes());
        let expected: [[usize; 2]; 8] = [[f, c], [1, c], [c, c], [1, c], [t, t], [1, t], [c, k], [1, k]];
        for ((_, name, tensor), want) in b.params.iter().zip(expected) {
            if tensor.shape() != want {
                return Err(contract(format!("parameter {name} has shape {:?}, expected {want:?}", tensor.shape())));
            }
        }
        Ok(b)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable parameters; refuses once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(contract(format!("branch {} is frozen", self.language_id)));
        }
        Ok(&mut self.params)
    }

    pub fn snapshot(&self) -> &[GlobalId] {
        &self.snapshot
    }

    /// Classifier width including blank.
    pub fn classes(&self) -> usize {
        self.snapshot.len() + 1
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// SHA-256 over names and parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Appends zero classifier columns for union entries added since the
    /// snapshot. Existing columns are untouched.
    pub fn widen(&mut self, union: &UnionCharset) -> Result<()> {
        if self.frozen {
            return Err(contract(format!("branch {} is frozen", self.language_id)));
        }
        if union.entries().get(..self.snapshot.len()) != Some(&self.snapshot[..]) {
            return Err(contract("widen: union does not extend the branch snapshot"));
        }
        let (c, old, new) = (self.shape.channels, self.classes(), union.width());
        let w_id = self.params.id("cls.w").expect("layout checked");
        let b_id = self.params.id("cls.b").expect("layout checked");
        let w = self.params.get(w_id);
        let mut wd = vec![0.0; c * new];
        for r in 0..c {
            wd[r * new..r * new + old].copy_from_slice(&w.data()[r * old..(r + 1) * old]);
        }
        let mut bd = vec![0.0; new];
        bd[..old].copy_from_slice(self.params.get(b_id).data());
        self.params.replace(w_id, Tensor::new([c, new], wd)?);
        self.params.replace(b_id, Tensor::new([1, new], bd)?);
        self.snapshot = union.entries().to_vec();
        Ok(())
    }

    /// Places the parameters on `g`. Frozen branches always enter as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> BranchVars {
        BranchVars(self.params.register(g, trainable && !self.frozen))
    }

    /// Frame matrix for a batch of images, `(batch·frames) × features`.
    pub fn frames_of(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let fc = &self.shape.frame;
        let block = fc.frames * fc.features();
        let mut data = vec![0.0; images.len() * block];
        for (img, out) in images.iter().zip(data.chunks_mut(block)) {
            fc.extract_into(img, out)?;
        }
        Ok(Tensor::new([images.len() * fc.frames, fc.features()], data)?)
    }

    /// Skeleton forward: `(batch·frames) × channels`.
    pub fn features_var(&self, g: &mut Graph, v: &BranchVars, frames: Var) -> Result<Var> {
        let p = &v.0;
        let (t, c) = (self.shape.frame.frames, self.shape.channels);
        let rows = g.shape(frames)[0];
        if rows % t != 0 {
            return Err(contract(format!("{rows} frame rows is not a multiple of {t}")));
        }
        let batch = rows / t;
        let e = g.linear(frames, p[0], p[1])?;
        let e = g.tanh(e)?;
        let h1 = g.linear(e, p[2], p[3])?;
        let h1 = g.tanh(h1)?;
        let m = g.reshape(h1, &[batch, t, c])?;
        let m = g.permute(m, &[0, 2, 1])?;
        let m = g.reshape(m, &[batch * c, t])?;
        let m = g.linear(m, p[4], p[5])?;
        let m = g.tanh(m)?;
        let m = g.reshape(m, &[batch, c, t])?;
        let m = g.permute(m, &[0, 2, 1])?;
        let m = g.reshape(m, &[batch * t, c])?;
        Ok(g.add(h1, m)?)
    }

    /// Softmax over the classifier logits with out-of-mask entries pushed to
    /// [`MASK_LOGIT`]: those probabilities are exactly zero and their columns
    /// receive no gradient.
    pub fn classify_masked(&self, g: &mut Graph, v: &BranchVars, features: Var, mask: &[bool]) -> Result<Var> {
        let k = self.classes();
        if mask.len() != k {
            return Err(contract(format!("mask width {} != classifier width {k}", mask.len())));
        }
        let rows = g.shape(features)[0];
        let logits = g.linear(features, v.0[6], v.0[7])?;
        let logits = if mask.iter().all(|&m| m) {
            logits
        } else {
            let offset = Tensor::from_fn([rows, k], |i| if mask[i % k] { 0.0 } else { MASK_LOGIT });
            let offset = g.constant(offset);
            g.add(logits, offset)?
        };
        Ok(g.softmax(logits, 1)?)
    }

    /// Features of one image, `frames × channels`, without recording anything.
    pub fn extract_features(&self, image: &GrayImage) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.register(&mut g, false);
        let x = g.constant(self.frames_of(&[image])?);
        let f = self.features_var(&mut g, &v, x)?;
        Ok(g.value(f).clone())
    }

    /// Masked probabilities for a batch, in the branch's own column space.
    pub fn predict_batch(&self, images: &[&GrayImage], mask: &[bool]) -> Result<Vec<SequenceProbs>> {
        let (_, probs) = self.forward_batch(images, mask)?;
        Ok(probs)
    }

    /// Features and masked probabilities for a batch.
    pub fn forward_batch(&self, images: &[&GrayImage], mask: &[bool]) -> Result<(Vec<Tensor>, Vec<SequenceProbs>)> {
        let mut g = Graph::new();
        let v = self.register(&mut g, false);
        let x = g.constant(self.frames_of(images)?);
        let f = self.features_var(&mut g, &v, x)?;
        let p = self.classify_masked(&mut g, &v, f, mask)?;
        let (t, c, k) = (self.shape.frame.frames, self.shape.channels, self.classes());
        let feats = g
            .value(f)
            .data()
            .chunks(t * c)
            .map(|d| Tensor::new([t, c], d.to_vec()))
            .collect::<mrn_autograd::Result<Vec<_>>>()?;
        let probs = g
            .value(p)
            .data()
            .chunks(t * k)
            .map(|d| SequenceProbs::new(t, k, d.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((feats, probs))
    }

    /// Masked probabilities padded to `union`, computed in parallel chunks.
    pub fn predict_union(&self, images: &[&GrayImage], mask: &[bool], union: &UnionCharset) -> Result<Vec<SequenceProbs>> {
        let chunks: Vec<Vec<SequenceProbs>> = images
            .par_chunks(64)
            .map(|chunk| {
                self.predict_batch(chunk, mask)?
                    .iter()
                    .map(|p| pad_to_union(p, &self.snapshot, union))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Language mask of this branch over its own classifier columns.
    pub fn own_mask(&self, union: &UnionCharset) -> Result<Vec<bool>> {
        let full = union.mask(self.language_id)?;
        Ok(full[..self.classes()].to_vec())
    }
}
