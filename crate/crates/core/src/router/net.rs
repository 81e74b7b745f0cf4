use mrn_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DomainScores, FeatureCubic};
use crate::error::{contract, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    #[default]
    Dm,
    Mlp,
}

impl std::str::FromStr for RouterKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dm" => Ok(RouterKind::Dm),
            "mlp" => Ok(RouterKind::Mlp),
            other => Err(format!("unknown router {other:?} (expected dm or mlp)")),
        }
    }
}

/// Domain router over `(batch, P, D, C)` cubics.
#[derive(Clone, Debug)]
pub struct Router {
    pub kind: RouterKind,
    pub patches: usize,
    pub domains: usize,
    pub channels: usize,
    pub depth: usize,
    pub hidden: usize,
    params: ParamStore,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let a = scale * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| rng.gen_range(-a..a))
}

/// Gate projections start small with unit bias, so each gate opens near 1.
const GATE_OUT_SCALE: f64 = 0.1;

impl Router {
    pub fn new(kind: RouterKind, patches: usize, domains: usize, channels: usize, depth: usize, hidden: usize, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(contract("router depth must be at least 1"));
        }
        if patches == 0 || domains == 0 || channels == 0 || hidden == 0 {
            return Err(contract("router dimensions must be positive"));
        }
        let mut r = rng::stream(seed, rng::label("router-init"));
        let mut params = ParamStore::new();
        let (pd, c) = (patches * domains, channels);
        match kind {
            RouterKind::Dm => {
                for b in 0..depth {
                    params.add(format!("block{b}.chan.w"), uniform(&mut r, c, c, 1.0));
                    params.add(format!("block{b}.chan.b"), Tensor::zeros([1, c]));
                    for (axis, n) in [("pd", pd), ("ch", c)] {
                        params.add(format!("block{b}.{axis}.w1"), uniform(&mut r, n, n, 1.0));
                        params.add(format!("block{b}.{axis}.b1"), Tensor::zeros([1, n]));
                        params.add(format!("block{b}.{axis}.ln_g"), Tensor::ones([1, n]));
                        params.add(format!("block{b}.{axis}.ln_b"), Tensor::zeros([1, n]));
                        params.add(format!("block{b}.{axis}.w2"), uniform(&mut r, n, n, GATE_OUT_SCALE));
                        params.add(format!("block{b}.{axis}.b2"), Tensor::ones([1, n]));
                    }
                }
                params.add("head.w", uniform(&mut r, domains, domains, 1.0));
                params.add("head.b", Tensor::zeros([1, domains]));
            }
            RouterKind::Mlp => {
                params.add("fc1.w", uniform(&mut r, pd * c, hidden, 1.0));
                params.add("fc1.b", Tensor::zeros([1, hidden]));
                params.add("fc2.w", uniform(&mut r, hidden, domains, 1.0));
                params.add("fc2.b", Tensor::zeros([1, domains]));
            }
        }
        Ok(Router {
            kind,
            patches,
            domains,
            channels,
            depth,
            hidden,
            params,
        })
    }

    pub fn from_parts(kind: RouterKind, patches: usize, domains: usize, channels: usize, depth: usize, hidden: usize, params: ParamStore) -> Result<Self> {
        let reference = Router::new(kind, patches, domains, channels, depth, hidden, 0)?;
        let want: Vec<(&str, &[usize])> = reference.params.iter().map(|(_, n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(_, n, t)| (n, t.shape())).collect();
        if want != got {
            return Err(contract("router parameters do not match the expected layout"));
        }
        Ok(Router { params, ..reference })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

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

    /// Zeroes the output layer so every score is `1/D`.
    pub fn zero_head(&mut self) {
        let names: &[&str] = match self.kind {
            RouterKind::Dm => &["head.w", "head.b"],
            RouterKind::Mlp => &["fc2.w", "fc2.b"],
        };
        for n in names {
            let id = self.params.id(n).expect("layout fixed at construction");
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.register(g, trainable)
    }

    /// `x (rows × n)` → `gate(x) ⊙ x` with gate = proj₂(LN(proj₁ x)).
    fn gate(g: &mut Graph, x: Var, p: &[Var]) -> Result<Var> {
        let rows = g.shape(x)[0];
        let h = g.linear(x, p[0], p[1])?;
        let h = g.layer_norm(h, 1)?;
        let ones = g.constant(Tensor::ones([rows, 1]));
        let gain = g.matmul(ones, p[2])?;
        let shift = g.matmul(ones, p[3])?;
        let h = g.mul(h, gain)?;
        let h = g.add(h, shift)?;
        let gate = g.linear(h, p[4], p[5])?;
        Ok(g.mul(gate, x)?)
    }

    /// Scores `(batch × D)` for a `(batch·P·D·C)`-element cubic node of shape
    /// `[batch, P, D, C]`.
    pub fn forward_var(&self, g: &mut Graph, v: &[Var], cubic: Var) -> Result<Var> {
        let shape = g.shape(cubic).to_vec();
        let (p, d, c) = (self.patches, self.domains, self.channels);
        if shape.len() != 4 || shape[1..] != [p, d, c] {
            return Err(contract(format!(
                "router expects cubics of shape [batch, {p}, {d}, {c}], got {shape:?}"
            )));
        }
        let batch = shape[0];
        let logits = match self.kind {
            RouterKind::Dm => {
                let per_block = 14;
                let mut x = g.reshape(cubic, &[batch * p * d, c])?;
                for b in 0..self.depth {
                    let w = &v[b * per_block..(b + 1) * per_block];
                    let u = g.linear(x, w[0], w[1])?;
                    // patch-domain mixing, one row per (sample, channel)
                    let z = g.reshape(u, &[batch, p * d, c])?;
                    let z = g.permute(z, &[0, 2, 1])?;
                    let z = g.reshape(z, &[batch * c, p * d])?;
                    let z = Self::gate(g, z, &w[2..8])?;
                    let z = g.reshape(z, &[batch, c, p * d])?;
                    let z = g.permute(z, &[0, 2, 1])?;
                    let z = g.reshape(z, &[batch * p * d, c])?;
                    let y = g.add(u, z)?;
                    let z = Self::gate(g, y, &w[8..14])?;
                    x = g.add(y, z)?;
                }
                let x = g.reshape(x, &[batch, p, d, c])?;
                let x = g.mean(x, 3)?;
                let x = g.mean(x, 1)?;
                let n = v.len();
                g.linear(x, v[n - 2], v[n - 1])?
            }
            RouterKind::Mlp => {
                let x = g.reshape(cubic, &[batch, p * d * c])?;
                let h = g.linear(x, v[0], v[1])?;
                let h = g.relu(h)?;
                g.linear(h, v[2], v[3])?
            }
        };
        Ok(g.softmax(logits, 1)?)
    }

    /// Inference on a list of cubics.
    pub fn scores(&self, cubics: &[FeatureCubic]) -> Result<Vec<DomainScores>> {
        if cubics.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(cubics.len() * cubics[0].data.len());
        for c in cubics {
            if c.shape() != [self.patches, self.domains, self.channels] {
                return Err(contract(format!("cubic of shape {:?} does not fit the router", c.shape())));
            }
            data.extend_from_slice(&c.data);
        }
        let mut g = Graph::new();
        let v = self.register(&mut g, false);
        let x = g.constant(Tensor::new([cubics.len(), self.patches, self.domains, self.channels], data)?);
        let s = self.forward_var(&mut g, &v, x)?;
        Ok(g.value(s).data().chunks(self.domains).map(|r| DomainScores(r.to_vec())).collect())
    }
}
